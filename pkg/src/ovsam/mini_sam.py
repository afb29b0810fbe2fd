"""Teacher segmentation encoder: a small ViT trained jointly with the
promptable decoder for class-agnostic mask prediction.

The teacher's stride-16 feature grid is the distillation target for the
adapter stage; the encoder itself is never used at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import synthdata
from .archive import module_hash, save_archive
from .decoder import Prompt, PromptableDecoder, binarize
from .losses import dice_loss, iou_regression_loss, mask_ce_loss
from .ops import TransformerBlock, seed_all, to_tensor_image
from .rng import CounterRng
from .synthdata import DatasetManifest


@dataclass
class TeacherConfig:
    patch: int = 16
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 8.0
    epochs: int = 14
    batch_size: int = 8
    lr: float = 1.5e-3
    weight_decay: float = 1e-4
    box_jitter_sigma: float = 2.0
    feature_noise_sigma: float = 0.25  # decoder robustness to student residual
    noise_finetune_epochs: int = 6  # decoder-only, on frozen cached features
    holdout_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.patch <= 0 or self.dim <= 0 or self.depth <= 0:
            raise ValueError("TeacherConfig fields must be positive")


class TeacherEncoder(nn.Module):
    """Patch embedding + transformer blocks + learned 2-D positional
    embeddings, reshaped back to a (dim, H/patch, W/patch) grid."""

    def __init__(self, cfg: TeacherConfig | None = None, grid: int = 8):
        super().__init__()
        self.cfg = cfg or TeacherConfig()
        self.cfg.validate()
        self.grid = grid
        self.patch_embed = nn.Conv2d(
            3, self.cfg.dim, kernel_size=self.cfg.patch, stride=self.cfg.patch
        )
        self.pos_embed = nn.Parameter(torch.zeros(grid * grid, self.cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(self.cfg.dim, self.cfg.heads, self.cfg.mlp_ratio)
            for _ in range(self.cfg.depth)
        )
        self.norm = nn.LayerNorm(self.cfg.dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2] % self.cfg.patch or images.shape[-1] % self.cfg.patch:
            raise ValueError("image dims must be divisible by the patch size")
        x = self.patch_embed(images)  # B, d, fh, fw
        b, d, fh, fw = x.shape
        if fh * fw != self.pos_embed.shape[0]:
            raise ValueError(
                f"grid {fh}x{fw} does not match positional embedding "
                f"({self.pos_embed.shape[0]} cells)"
            )
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, d, fh, fw)


def _load_scene_arrays(manifest: DatasetManifest) -> tuple[np.ndarray, list[dict]]:
    images, anns = [], []
    for i in range(len(manifest)):
        img, ann = synthdata.load_scene(manifest, i)
        images.append(np.round(img * 255).astype(np.uint8))
        anns.append(ann)
    return np.stack(images), anns


def jitter_box(box, rng: CounterRng, sigma: float, image_size: int) -> tuple:
    """Perturb box corners by N(0, sigma); keeps the box valid, >=2 px."""
    x1, y1, x2, y2 = (float(v) + rng.normal(0.0, sigma) for v in box)
    x1 = min(max(x1, 0.0), image_size - 2.0)
    y1 = min(max(y1, 0.0), image_size - 2.0)
    x2 = min(max(x2, x1 + 2.0), float(image_size))
    y2 = min(max(y2, y1 + 2.0), float(image_size))
    return (x1, y1, x2, y2)


def heldout_mean_iou(
    encoder: TeacherEncoder,
    decoder: PromptableDecoder,
    images_u8: np.ndarray,
    anns: list[dict],
    indices,
) -> float:
    """Mean IoU of GT-box-prompted predictions against GT masks."""
    ious = []
    with torch.no_grad():
        for i in indices:
            img = to_tensor_image(images_u8[i].astype(np.float32) / 255.0)
            feats = encoder(img.unsqueeze(0))[0]
            h, w = img.shape[-2:]
            insts = anns[i]["instances"]
            prompts = [Prompt.box(*inst["box"]) for inst in insts]
            pred = decoder(feats, prompts, (h, w))
            for k, inst in enumerate(insts):
                gt = synthdata.rle_decode(inst["rle"], h, w)
                pm = binarize(pred.mask_logits[k]).numpy()
                ious.append(synthdata.mask_iou(pm, gt))
    return float(np.mean(ious))


def train_teacher(
    manifest: DatasetManifest,
    decoder: PromptableDecoder | None = None,
    cfg: TeacherConfig | None = None,
) -> tuple[TeacherEncoder, PromptableDecoder, dict]:
    """Joint encoder+decoder training with BCE + Dice + IoU-regression on
    jittered GT-box prompts. Returns (encoder, decoder, history)."""
    cfg = cfg or TeacherConfig()
    cfg.validate()
    seed_all(cfg.seed)
    encoder = TeacherEncoder(cfg)
    if decoder is None:
        decoder = PromptableDecoder(dim=cfg.dim, num_heads=cfg.heads)

    images_u8, anns = _load_scene_arrays(manifest)
    n = len(anns)
    n_hold = max(1, int(n * cfg.holdout_fraction))
    train_ids = list(range(n - n_hold))
    hold_ids = list(range(n - n_hold, n))
    image_size = images_u8.shape[1]

    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(train_ids) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(1, cfg.epochs * steps_per_epoch)
    )
    rng = CounterRng(cfg.seed).derive("teacher")

    def sample_prompt_batch(ids):
        prompts, feat_rows, gts = [], [], []
        for row, i in enumerate(ids):
            for inst in anns[i]["instances"]:
                box = inst["box"]
                if rng.uniform() < 0.5:  # half exact GT, half jittered
                    box = jitter_box(box, rng, cfg.box_jitter_sigma, image_size)
                prompts.append(Prompt.box(*box))
                feat_rows.append(row)
                gts.append(synthdata.rle_decode(inst["rle"], image_size, image_size))
        return prompts, feat_rows, gts

    def prompt_losses(feats_rows, prompts, gts):
        pred = decoder(feats_rows, prompts, (image_size, image_size))
        target = torch.from_numpy(np.stack(gts)).to(torch.float32)
        loss_ce = mask_ce_loss(pred.mask_logits, target)
        loss_dice = dice_loss(pred.mask_logits, target)
        with torch.no_grad():
            realized = torch.tensor(
                [
                    synthdata.mask_iou(binarize(pred.mask_logits[k]).numpy(), gts[k])
                    for k in range(len(gts))
                ],
                dtype=torch.float32,
            )
        loss = loss_ce + loss_dice + iou_regression_loss(pred.iou_pred, realized)
        if not torch.isfinite(loss):
            raise RuntimeError("teacher training diverged (non-finite loss)")
        return loss

    history: dict = {"epoch_loss": []}
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train_ids))
        losses = []
        for b in range(steps_per_epoch):
            ids = [train_ids[j] for j in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if not ids:
                continue
            batch = torch.from_numpy(
                images_u8[ids].astype(np.float32) / 255.0
            ).permute(0, 3, 1, 2)
            feats = encoder(batch)
            prompts, feat_rows, gts = sample_prompt_batch(ids)
            loss = prompt_losses(feats[feat_rows], prompts, gts)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        history["epoch_loss"].append(float(np.mean(losses)))

    # decoder-only robustness fine-tune: the encoder freezes, and half the
    # steps decode noise-perturbed cached features so the decoder tolerates
    # the adapted-backbone residual it will see at inference
    if cfg.epochs > 0 and cfg.noise_finetune_epochs > 0 and cfg.feature_noise_sigma > 0:
        encoder.eval()
        cached: list[torch.Tensor] = []
        with torch.no_grad():
            for start in range(0, len(train_ids), 64):
                ids = train_ids[start : start + 64]
                batch = torch.from_numpy(
                    images_u8[ids].astype(np.float32) / 255.0
                ).permute(0, 3, 1, 2)
                cached.append(encoder(batch))
        cached_feats = torch.cat(cached)
        noise_gen = torch.Generator().manual_seed(cfg.seed)
        opt_ft = torch.optim.AdamW(
            decoder.parameters(), lr=0.5 * cfg.lr, weight_decay=cfg.weight_decay
        )
        sched_ft = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt_ft, T_max=max(1, cfg.noise_finetune_epochs * steps_per_epoch)
        )
        ft_losses = []
        for _epoch in range(cfg.noise_finetune_epochs):
            order = rng.permutation(len(train_ids))
            for b in range(steps_per_epoch):
                ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                if not ids:
                    continue
                feats = cached_feats[ids]
                if b % 2 == 1:
                    feats = feats + cfg.feature_noise_sigma * torch.randn(
                        feats.shape, generator=noise_gen
                    )
                prompts, feat_rows, gts = sample_prompt_batch(ids)
                loss = prompt_losses(feats[feat_rows], prompts, gts)
                opt_ft.zero_grad()
                loss.backward()
                opt_ft.step()
                sched_ft.step()
                ft_losses.append(float(loss.detach()))
        history["noise_finetune_loss"] = float(np.mean(ft_losses))

    encoder.eval()
    decoder.eval()
    history["holdout_iou"] = heldout_mean_iou(encoder, decoder, images_u8, anns, hold_ids)
    history["teacher_hash"] = module_hash(encoder)
    return encoder, decoder, history


def save_teacher(path, encoder: TeacherEncoder, decoder: PromptableDecoder, history=None):
    tensors = {f"teacher.{k}": v for k, v in encoder.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in decoder.state_dict().items()})
    meta = {
        "kind": "teacher",
        "holdout_iou": (history or {}).get("holdout_iou"),
        "config": {
            "patch": encoder.cfg.patch,
            "dim": encoder.cfg.dim,
            "depth": encoder.cfg.depth,
            "heads": encoder.cfg.heads,
            "mlp_ratio": encoder.cfg.mlp_ratio,
        },
    }
    save_archive(path, tensors, meta)
