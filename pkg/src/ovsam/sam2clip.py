"""Feature-alignment adapter: fuses the frozen pyramid features onto the
teacher's stride-16 grid and distills with per-pixel MSE so the decoder
can run on the shared backbone alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import synthdata
from .archive import module_hash, save_archive
from .decoder import Prompt, PromptableDecoder, binarize
from .mini_clip import MiniClip, PyramidFeatures
from .mini_sam import TeacherEncoder
from .ops import TransformerBlock, bilinear_resize, seed_all, sinusoidal_pe_2d, to_tensor_image
from .rng import CounterRng
from .synthdata import DatasetManifest


@dataclass
class AdapterConfig:
    dim: int = 64
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 3.0
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1.5e-3
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.1
    seed: int = 0


class Sam2ClipAdapter(nn.Module):
    """Per-level linear projections -> stride-16 fusion -> transformer
    blocks. The fine level folds 2x2 cells into channels (space-to-depth)
    before its 1x1 projection: averaging it down instead measurably
    destroys the sub-stride detail the decoder needs."""

    def __init__(self, cfg: AdapterConfig | None = None, in_channels=(32, 64, 128)):
        super().__init__()
        self.cfg = cfg or AdapterConfig()
        d = self.cfg.dim
        self.proj1 = nn.Conv2d(4 * in_channels[0], d, 1)
        self.proj2 = nn.Conv2d(in_channels[1], d, 1)
        self.proj3 = nn.Conv2d(in_channels[2], d, 1)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, self.cfg.heads, self.cfg.mlp_ratio)
            for _ in range(self.cfg.depth)
        )
        self._pe_cache: dict[tuple[int, int], torch.Tensor] = {}

    def fuse_pyramid(self, feats: PyramidFeatures) -> torch.Tensor:
        """Project each level to d on the stride-16 grid and sum: level1 via
        space-to-depth + 1x1, level2 identity, level3 bilinear up x2."""
        h16, w16 = feats.level2.shape[-2:]
        if feats.level1.shape[-2:] != (2 * h16, 2 * w16) or feats.level3.shape[-2:] != (
            h16 // 2,
            w16 // 2,
        ):
            raise ValueError("pyramid level shapes are not stride 8/16/32")
        p1 = self.proj1(torch.pixel_unshuffle(feats.level1, 2))
        p2 = self.proj2(feats.level2)
        p3 = bilinear_resize(self.proj3(feats.level3), h16, w16)
        return p1 + p2 + p3

    def adapt(self, fused: torch.Tensor) -> torch.Tensor:
        """Transformer refinement with fixed 2-D sinusoidal positions."""
        b, d, fh, fw = fused.shape
        key = (fh, fw)
        if key not in self._pe_cache:
            self._pe_cache[key] = sinusoidal_pe_2d(fh, fw, d)
        x = fused.flatten(2).transpose(1, 2) + self._pe_cache[key].to(fused.dtype)
        for blk in self.blocks:
            x = blk(x)
        return x.transpose(1, 2).reshape(b, d, fh, fw)

    def forward(self, feats: PyramidFeatures) -> torch.Tensor:
        return self.adapt(self.fuse_pyramid(feats))


def distill_loss(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean over cells and channels of the squared feature difference."""
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch {student.shape} vs {teacher.shape}")
    return ((student - teacher) ** 2).mean()


def _precompute_features(
    clip: MiniClip, teacher: TeacherEncoder, manifest: DatasetManifest
) -> tuple[list[PyramidFeatures], torch.Tensor]:
    """Frozen-model features for every scene (both models are frozen, so
    this trades memory for a large per-epoch speedup)."""
    pyramids: list[PyramidFeatures] = []
    teacher_feats = []
    with torch.no_grad():
        for i in range(len(manifest)):
            img, _ = synthdata.load_scene(manifest, i)
            batch = to_tensor_image(img).unsqueeze(0)
            pyramids.append(clip.encode_image_pyramid(batch))
            teacher_feats.append(teacher(batch)[0])
    return pyramids, torch.stack(teacher_feats)


def _stack_pyramids(pyramids: list[PyramidFeatures], ids) -> PyramidFeatures:
    return PyramidFeatures(
        level1=torch.cat([pyramids[i].level1 for i in ids]),
        level2=torch.cat([pyramids[i].level2 for i in ids]),
        level3=torch.cat([pyramids[i].level3 for i in ids]),
    )


def heldout_distill_loss(
    adapter: Sam2ClipAdapter, pyramids, teacher_feats, ids
) -> float:
    with torch.no_grad():
        losses = []
        for start in range(0, len(ids), 64):
            chunk = ids[start : start + 64]
            student = adapter(_stack_pyramids(pyramids, chunk))
            losses.append(float(distill_loss(student, teacher_feats[chunk])))
        return float(np.mean(losses))


def run_distillation(
    manifest: DatasetManifest,
    clip: MiniClip,
    teacher: TeacherEncoder,
    cfg: AdapterConfig | None = None,
    log_path: Path | str | None = None,
) -> tuple[Sam2ClipAdapter, dict]:
    """Stage-1 training: only the adapter (and its level projections)
    updates; the frozen models are hash-checked before and after."""
    cfg = cfg or AdapterConfig()
    seed_all(cfg.seed)
    adapter = Sam2ClipAdapter(cfg, in_channels=clip.cfg.channels)

    clip_hash = module_hash(clip)
    teacher_hash = module_hash(teacher)

    pyramids, teacher_feats = _precompute_features(clip, teacher, manifest)
    n = len(pyramids)
    n_hold = max(1, int(n * cfg.holdout_fraction))
    train_ids = np.arange(0, n - n_hold)
    hold_ids = np.arange(n - n_hold, n)

    opt = torch.optim.AdamW(adapter.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(train_ids) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.epochs * steps_per_epoch)
    )
    rng = CounterRng(cfg.seed).derive("distill")

    history: dict = {
        "heldout_initial": heldout_distill_loss(adapter, pyramids, teacher_feats, hold_ids),
        "heldout_per_epoch": [],
    }
    log_records = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train_ids))
        for b in range(steps_per_epoch):
            ids = train_ids[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if len(ids) == 0:
                continue
            student = adapter(_stack_pyramids(pyramids, ids))
            loss = distill_loss(student, teacher_feats[ids])
            if not torch.isfinite(loss):
                raise RuntimeError("distillation diverged (non-finite loss)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log_records.append({"step": step, "train_loss": float(loss.detach())})
            step += 1
        heldout = heldout_distill_loss(adapter, pyramids, teacher_feats, hold_ids)
        history["heldout_per_epoch"].append(heldout)
        log_records[-1]["heldout_loss"] = heldout

    if module_hash(clip) != clip_hash:
        raise RuntimeError("frozen CLIP parameters changed during distillation")
    if module_hash(teacher) != teacher_hash:
        raise RuntimeError("frozen teacher parameters changed during distillation")

    history["heldout_final"] = (
        history["heldout_per_epoch"][-1]
        if history["heldout_per_epoch"]
        else history["heldout_initial"]
    )
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)

    if log_path is not None:
        with open(log_path, "w") as f:
            for rec in log_records:
                f.write(json.dumps(rec) + "\n")
    return adapter, history


def substitutability_iou(
    clip: MiniClip,
    adapter: Sam2ClipAdapter,
    teacher: TeacherEncoder,
    student_decoder: PromptableDecoder,
    manifest: DatasetManifest,
    indices,
    teacher_decoder: PromptableDecoder | None = None,
) -> tuple[float, float]:
    """Mean GT-box-prompt IoU of the adapted-backbone path vs the teacher
    path. Each feature source decodes with its own decoder (pass the same
    module twice for a shared-decoder comparison)."""
    teacher_decoder = teacher_decoder or student_decoder
    ious_student, ious_teacher = [], []
    with torch.no_grad():
        for i in indices:
            img, ann = synthdata.load_scene(manifest, i)
            batch = to_tensor_image(img).unsqueeze(0)
            h, w = img.shape[:2]
            student = adapter(clip.encode_image_pyramid(batch))[0]
            tfeat = teacher(batch)[0]
            prompts = [Prompt.box(*inst["box"]) for inst in ann["instances"]]
            pred_s = student_decoder(student, prompts, (h, w))
            pred_t = teacher_decoder(tfeat, prompts, (h, w))
            for k, inst in enumerate(ann["instances"]):
                gt = synthdata.rle_decode(inst["rle"], h, w)
                ious_student.append(
                    synthdata.mask_iou(binarize(pred_s.mask_logits[k]).numpy(), gt)
                )
                ious_teacher.append(
                    synthdata.mask_iou(binarize(pred_t.mask_logits[k]).numpy(), gt)
                )
    return float(np.mean(ious_student)), float(np.mean(ious_teacher))


def save_adapter(path, adapter: Sam2ClipAdapter, history=None) -> None:
    tensors = {f"sam2clip.{k}": v for k, v in adapter.state_dict().items()}
    meta = {
        "kind": "sam2clip",
        "heldout_final": (history or {}).get("heldout_final"),
        "config": {
            "dim": adapter.cfg.dim,
            "depth": adapter.cfg.depth,
            "heads": adapter.cfg.heads,
            "mlp_ratio": adapter.cfg.mlp_ratio,
        },
    }
    save_archive(path, tensors, meta)
