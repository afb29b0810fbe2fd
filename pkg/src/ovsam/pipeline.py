"""Stage-2 joint training (segmentation + classification-only co-training),
the evaluation protocol, run configuration, and end-to-end stage
orchestration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import clip2sam as c2s
from . import synthdata
from .archive import load_archive, module_hash, save_archive
from .baselines import image_crop_classify
from .clip2sam import Clip2Sam, FusionConfig, LabelDistribution
from .decoder import Prompt, PromptableDecoder, binarize
from .losses import LossWeights, cls_loss, dice_loss, iou_regression_loss, mask_ce_loss, total_loss
from .mini_clip import (
    ClipConfig,
    MiniClip,
    PyramidFeatures,
    Vocabulary,
    load_clip,
    pretrain_clip,
    save_clip,
)
from .mini_sam import TeacherConfig, TeacherEncoder, jitter_box, save_teacher, train_teacher
from .model import OpenVocabSam, assemble
from .ops import seed_all, to_tensor_image
from .rng import CounterRng
from .sam2clip import AdapterConfig, Sam2ClipAdapter, run_distillation, save_adapter
from .synthdata import DatasetManifest, build_datasets, load_manifest

# re-exported loss surface (they belong to this module's contract)
__all__ = [
    "TrainConfig",
    "Metrics",
    "train_joint",
    "evaluate",
    "evaluate_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "RunConfig",
    "dice_loss",
    "mask_ce_loss",
    "cls_loss",
    "total_loss",
    "LossWeights",
]


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 12  # training epochs for the joint stage
    batch_size: int = 8
    lr: float = 2e-3  # recognition-head groups
    decoder_lr: float = 5e-4  # gentler: the decoder arrives pre-trained
    weight_decay: float = 1e-4
    cls_per_seg: int = 2  # one cls_only batch per this many seg batches
    box_jitter_sigma: float = 2.0
    point_prompt_fraction: float = 0.5
    path_dropout: float = 0.3  # chance to mask RoI or token per step (anti-shortcut)
    head_polish_epochs: int = 6  # head-only classification pass after the joint epochs
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("invalid TrainConfig")
        if self.cls_per_seg < 0:
            raise ValueError("cls_per_seg must be >= 0")
        self.weights.validate()
        self.fusion.validate()


@dataclass
class Metrics:
    iou_base: float
    iou_novel: float
    acc: float
    acc_base: float
    acc_novel: float
    counts: dict

    def to_json(self) -> dict:
        return {
            "iou_base": self.iou_base,
            "iou_novel": self.iou_novel,
            "acc": self.acc,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "counts": self.counts,
        }


# ---------------------------------------------------------------------------
# Frozen-feature caches


class SceneCache:
    """Precomputed frozen features for a manifest: pyramid levels, adapted
    student grid, and parsed annotations. Images load once as uint8."""

    def __init__(self, manifest: DatasetManifest, clip: MiniClip, adapter: Sam2ClipAdapter):
        self.manifest = manifest
        self.images: list[np.ndarray] = []
        self.anns: list[dict] = []
        l1, l2, l3, student = [], [], [], []
        with torch.no_grad():
            for i in range(len(manifest)):
                img, ann = synthdata.load_scene(manifest, i)
                self.images.append(np.round(img * 255).astype(np.uint8))
                self.anns.append(ann)
                feats = clip.encode_image_pyramid(to_tensor_image(img).unsqueeze(0))
                l1.append(feats.level1[0])
                l2.append(feats.level2[0])
                l3.append(feats.level3[0])
                student.append(adapter(feats)[0])
        self.level1 = torch.stack(l1)
        self.level2 = torch.stack(l2)
        self.level3 = torch.stack(l3)
        self.student = torch.stack(student)

    def image_float(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0

    def pyramid(self, ids) -> PyramidFeatures:
        return PyramidFeatures(
            level1=self.level1[ids], level2=self.level2[ids], level3=self.level3[ids]
        )

    @property
    def image_size(self) -> int:
        return self.images[0].shape[0]


# ---------------------------------------------------------------------------
# Stage-2 joint training


def _base_text_embeddings(vocab: Vocabulary, base_ids: list[int]) -> torch.Tensor:
    return torch.from_numpy(vocab.embeddings[base_ids])


def _seg_step(
    decoder: PromptableDecoder,
    head: Clip2Sam,
    cache: SceneCache,
    ids: list[int],
    rng: CounterRng,
    cfg: TrainConfig,
    base_ids: list[int],
    base_text: torch.Tensor,
) -> dict[str, torch.Tensor]:
    size = cache.image_size
    prompts, gts, targets, feat_rows = [], [], [], []
    for row, i in enumerate(ids):
        for inst in cache.anns[i]["instances"]:
            gt = synthdata.rle_decode(inst["rle"], size, size)
            gts.append(gt)
            targets.append(base_ids.index(inst["class_id"]))
            feat_rows.append(row)
            if rng.uniform() < cfg.point_prompt_fraction:
                x, y = synthdata.mask_center_point(gt)
                prompts.append(Prompt.point(x + 0.5, y + 0.5))
            else:
                prompts.append(
                    Prompt.box(*jitter_box(inst["box"], rng, cfg.box_jitter_sigma, size))
                )

    pred = decoder(cache.student[ids][feat_rows], prompts, (size, size))
    target_masks = torch.from_numpy(np.stack(gts)).to(torch.float32)
    loss_ce = mask_ce_loss(pred.mask_logits, target_masks)
    loss_dice = dice_loss(pred.mask_logits, target_masks)
    with torch.no_grad():
        realized = torch.tensor(
            [
                synthdata.mask_iou(binarize(pred.mask_logits[k]).numpy(), gts[k])
                for k in range(len(gts))
            ],
            dtype=torch.float32,
        )
    loss_iou = iou_regression_loss(pred.iou_pred, realized)

    maps = head.build_fpn(cache.pyramid(ids))
    boxes = []
    for k, p in enumerate(prompts):
        mask_np = binarize(pred.mask_logits[k].detach()).numpy()
        box, _ = c2s.prompt_to_region(p, mask_np, (size, size))
        boxes.append(box)
    emb = head.region_embedding(
        maps, boxes, pred.label_token_out, batch_idx=feat_rows,
        drop=_path_drop(rng, cfg.path_dropout),
    )
    logits = c2s.region_logits(emb, base_text, cfg.fusion.tau_region)
    loss_cls = cls_loss(logits, torch.tensor(targets))
    return {"ce": loss_ce, "dice": loss_dice, "iou": loss_iou, "cls": loss_cls}


def _path_drop(rng: CounterRng, p: float) -> str | None:
    """Per-step input-path dropout for the recognition head. Dropping the
    RoI (probability p) forces the decoder label token to carry class
    signal -- otherwise the RoI shortcut wins and the token path never
    develops; the token drops at p/3 so the RoI path stays primary."""
    u = rng.uniform()
    if u < p:
        return "roi"
    if u < p + p / 3.0:
        return "token"
    return None


def _cls_step(
    decoder: PromptableDecoder,
    head: Clip2Sam,
    cache: SceneCache,
    ids: list[int],
    rng: CounterRng,
    cfg: TrainConfig,
    base_ids: list[int],
    base_text: torch.Tensor,
) -> torch.Tensor:
    """Classification-only batch: GT full-object box as the region, label
    token taken from a no-grad decode, and only the recognition head in
    the gradient path."""
    size = cache.image_size
    boxes = [tuple(cache.anns[i]["instances"][0]["box"]) for i in ids]
    targets = [base_ids.index(cache.anns[i]["instances"][0]["class_id"]) for i in ids]
    prompts = [Prompt.box(*b) for b in boxes]
    with torch.no_grad():
        pred = decoder(cache.student[ids], prompts, (size, size))
    maps = head.build_fpn(cache.pyramid(ids))
    emb = head.region_embedding(
        maps, boxes, pred.label_token_out.detach(), batch_idx=list(range(len(ids))),
        drop=_path_drop(rng, cfg.path_dropout),
    )
    logits = c2s.region_logits(emb, base_text, cfg.fusion.tau_region)
    return cls_loss(logits, torch.tensor(targets))


def train_joint(
    seg_manifest: DatasetManifest,
    cls_manifest: DatasetManifest | None,
    clip: MiniClip,
    vocab: Vocabulary,
    adapter: Sam2ClipAdapter,
    decoder: PromptableDecoder,
    head: Clip2Sam | None = None,
    cfg: TrainConfig | None = None,
    include_seg: bool = True,
) -> tuple[PromptableDecoder, Clip2Sam, dict]:
    """Joint stage: segmentation batches update decoder + head via the
    weighted total loss; classification-only batches update only the head.
    Frozen components are hash-checked. include_seg=False runs a pure
    cls_only schedule (used to assert the update-mask contract)."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    seed_all(cfg.seed)
    if head is None:
        torch.manual_seed(cfg.seed)
        head = Clip2Sam(in_channels=clip.cfg.channels, d_f=adapter.cfg.dim, d_t=clip.cfg.d_t)

    frozen_hashes = {"clip": module_hash(clip), "adapter": module_hash(adapter)}
    base_ids = list(seg_manifest.class_split.base_ids)
    base_text = _base_text_embeddings(vocab, base_ids)

    seg_cache = SceneCache(seg_manifest, clip, adapter)
    cls_cache = SceneCache(cls_manifest, clip, adapter) if cls_manifest else None

    for p in list(decoder.parameters()) + list(head.parameters()):
        p.requires_grad_(True)
    opt = torch.optim.AdamW(
        [
            {"params": list(decoder.parameters()), "lr": cfg.decoder_lr},
            {"params": list(head.parameters()), "lr": cfg.lr},
        ],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    n_seg = len(seg_cache.anns)
    seg_steps = max(1, n_seg // cfg.batch_size) if include_seg else 0
    cls_steps = 0
    if cls_cache is not None and cfg.cls_per_seg > 0:
        cls_steps = (seg_steps // cfg.cls_per_seg) if include_seg else max(
            1, len(cls_cache.anns) // cfg.batch_size
        )
    total_steps = max(1, cfg.epochs * (seg_steps + cls_steps))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    rng = CounterRng(cfg.seed).derive("joint")
    cls_cursor = 0
    cls_order: list[int] = []

    def next_cls_ids(n: int) -> list[int]:
        nonlocal cls_cursor, cls_order
        ids = []
        for _ in range(n):
            if cls_cursor >= len(cls_order):
                cls_order = rng.permutation(len(cls_cache.anns))
                cls_cursor = 0
            ids.append(cls_order[cls_cursor])
            cls_cursor += 1
        return ids

    history: dict = {"epoch_loss": [], "cls_only_loss": []}
    for _epoch in range(cfg.epochs):
        epoch_losses = []
        decoder.train()
        head.train()
        if include_seg:
            order = rng.permutation(n_seg)
            for b in range(seg_steps):
                ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                if not ids:
                    continue
                comps = _seg_step(decoder, head, seg_cache, ids, rng, cfg, base_ids, base_text)
                loss = total_loss(comps, cfg.weights)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                epoch_losses.append(float(loss.detach()))
                if cls_cache is not None and cfg.cls_per_seg > 0 and (b + 1) % cfg.cls_per_seg == 0:
                    ids_c = next_cls_ids(cfg.batch_size)
                    loss_c = cfg.weights.lambda_cls * _cls_step(
                        decoder, head, cls_cache, ids_c, rng, cfg, base_ids, base_text
                    )
                    opt.zero_grad(set_to_none=True)
                    loss_c.backward()
                    opt.step()
                    sched.step()
                    history["cls_only_loss"].append(float(loss_c.detach()))
        else:
            for _b in range(cls_steps):
                ids_c = next_cls_ids(cfg.batch_size)
                loss_c = cfg.weights.lambda_cls * _cls_step(
                    decoder, head, cls_cache, ids_c, rng, cfg, base_ids, base_text
                )
                if not torch.isfinite(loss_c):
                    raise RuntimeError("non-finite classification loss")
                opt.zero_grad(set_to_none=True)
                loss_c.backward()
                opt.step()
                sched.step()
                history["cls_only_loss"].append(float(loss_c.detach()))
        if epoch_losses:
            history["epoch_loss"].append(float(np.mean(epoch_losses)))

    # head polish: classification-only pass over both streams with the
    # decoder frozen (labels through the head only, per the co-training
    # rule); lifts recognition without touching segmentation
    if include_seg and cfg.epochs > 0 and cfg.head_polish_epochs > 0:
        decoder.eval()
        head.train()
        opt_h = torch.optim.AdamW(
            head.parameters(), lr=cfg.lr / 2, weight_decay=cfg.weight_decay
        )
        pairs = [
            (i, k)
            for i in range(n_seg)
            for k in range(len(seg_cache.anns[i]["instances"]))
        ]
        polish_bs = 2 * cfg.batch_size
        steps = max(1, len(pairs) // polish_bs)
        sched_h = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt_h, T_max=max(1, cfg.head_polish_epochs * steps)
        )
        for _epoch in range(cfg.head_polish_epochs):
            order = rng.permutation(len(pairs))
            for b in range(steps):
                chosen = [pairs[j] for j in order[b * polish_bs : (b + 1) * polish_bs]]
                if not chosen:
                    continue
                scene_ids = sorted({i for i, _ in chosen})
                row_of = {i: r for r, i in enumerate(scene_ids)}
                insts = [seg_cache.anns[i]["instances"][k] for i, k in chosen]
                boxes = [tuple(map(float, inst["box"])) for inst in insts]
                targets = [base_ids.index(inst["class_id"]) for inst in insts]
                rows = [row_of[i] for i, _ in chosen]
                with torch.no_grad():
                    pred = decoder(
                        seg_cache.student[scene_ids][rows],
                        [Prompt.box(*b_) for b_ in boxes],
                        (seg_cache.image_size, seg_cache.image_size),
                    )
                maps = head.build_fpn(seg_cache.pyramid(scene_ids))
                emb = head.region_embedding(
                    maps, boxes, pred.label_token_out.detach(), batch_idx=rows,
                    drop=_path_drop(rng, cfg.path_dropout),
                )
                logits = c2s.region_logits(emb, base_text, cfg.fusion.tau_region)
                loss_h = cls_loss(logits, torch.tensor(targets))
                opt_h.zero_grad(set_to_none=True)
                loss_h.backward()
                opt_h.step()
                sched_h.step()
                if cls_cache is not None and (b + 1) % cfg.cls_per_seg == 0:
                    ids_c = next_cls_ids(polish_bs)
                    loss_c = _cls_step(
                        decoder, head, cls_cache, ids_c, rng, cfg, base_ids, base_text
                    )
                    opt_h.zero_grad(set_to_none=True)
                    loss_c.backward()
                    opt_h.step()
            history.setdefault("polish_loss", []).append(float(loss_h.detach()))

    if module_hash(clip) != frozen_hashes["clip"]:
        raise RuntimeError("frozen CLIP drifted during joint training")
    if module_hash(adapter) != frozen_hashes["adapter"]:
        raise RuntimeError("frozen adapter drifted during joint training")
    decoder.eval()
    head.eval()
    return decoder, head, history


# ---------------------------------------------------------------------------
# Evaluation


PROMPT_MODES = ("gt_box", "center_point")
CLASSIFIERS = ("ovsam", "image_crop", "feature_crop", "oracle")


def _instance_prompt(inst: dict, mode: str, image_size: int) -> Prompt:
    if mode == "gt_box":
        return Prompt.box(*inst["box"])
    if mode == "center_point":
        mask = synthdata.rle_decode(inst["rle"], image_size, image_size)
        x, y = synthdata.mask_center_point(mask)
        return Prompt.point(x + 0.5, y + 0.5)
    raise ValueError(f"unknown prompt mode {mode!r}")


def _uniform_dist(n: int) -> LabelDistribution:
    return LabelDistribution(probs=np.full(n, 1.0 / n), source="frozen", flagged=True)


def evaluate_matrix(
    bundle: OpenVocabSam,
    manifest: DatasetManifest,
    prompt_modes=("gt_box",),
    classifiers=("ovsam",),
    fusion_variants=(True,),
) -> dict[tuple, Metrics]:
    """One decode pass per prompt mode; every requested classifier reuses
    the same predicted masks. Keys: (prompt_mode, classifier, fusion)."""
    bundle.eval_mode()
    vocab = bundle.vocab
    split = manifest.class_split
    accum: dict[tuple, dict] = {}
    for mode in prompt_modes:
        for cls_name in classifiers:
            for fus in fusion_variants:
                accum[(mode, cls_name, fus)] = {
                    "iou_base": [],
                    "iou_novel": [],
                    "correct": [],
                    "correct_base": [],
                    "correct_novel": [],
                }

    with torch.no_grad():
        for i in range(len(manifest)):
            img, ann = synthdata.load_scene(manifest, i)
            h, w = img.shape[:2]
            feats, student = bundle.encode_scene(img)
            maps = bundle.clip2sam.build_fpn(feats)
            insts = ann["instances"]
            gt_masks = [synthdata.rle_decode(inst["rle"], h, w) for inst in insts]
            for mode in prompt_modes:
                prompts = [_instance_prompt(inst, mode, h) for inst in insts]
                pred = bundle.decoder(student, prompts, (h, w))
                pred_masks = [binarize(pred.mask_logits[k]).numpy() for k in range(len(insts))]
                ious = [synthdata.mask_iou(pm, gm) for pm, gm in zip(pred_masks, gt_masks)]

                region_boxes = []
                for k, p in enumerate(prompts):
                    box, _ = c2s.prompt_to_region(p, pred_masks[k], (h, w))
                    region_boxes.append(box)
                emb = bundle.clip2sam.region_embedding(
                    maps, region_boxes, pred.label_token_out, batch_idx=[0] * len(insts)
                )

                for k, inst in enumerate(insts):
                    gt_class = inst["class_id"]
                    is_base = split.is_base(gt_class)
                    for cls_name in classifiers:
                        for fus in fusion_variants:
                            if cls_name == "oracle":
                                probs = np.zeros(len(vocab))
                                probs[gt_class] = 1.0
                                dist = LabelDistribution(probs=probs, source="fused")
                                iou_k = 1.0
                            else:
                                iou_k = ious[k]
                                if cls_name == "ovsam":
                                    learned = c2s.classify_region(
                                        emb[k], vocab, bundle.fusion.tau_region
                                    )
                                    if fus:
                                        frozen = c2s.frozen_scores(
                                            feats, pred_masks[k], bundle.clip, vocab
                                        )
                                        dist = c2s.fuse_scores(
                                            learned, frozen, vocab, bundle.fusion
                                        )
                                    else:
                                        dist = learned
                                elif cls_name == "feature_crop":
                                    dist = c2s.frozen_scores(
                                        feats, pred_masks[k], bundle.clip, vocab
                                    )
                                elif cls_name == "image_crop":
                                    if int(pred_masks[k].sum()) == 0:
                                        dist = _uniform_dist(len(vocab))
                                    else:
                                        dist = image_crop_classify(
                                            img, pred_masks[k], bundle.clip, vocab
                                        )
                                else:
                                    raise ValueError(f"unknown classifier {cls_name!r}")
                            rec = accum[(mode, cls_name, fus)]
                            correct = int(dist.argmax == gt_class)
                            rec["correct"].append(correct)
                            if is_base:
                                rec["iou_base"].append(iou_k)
                                rec["correct_base"].append(correct)
                            else:
                                rec["iou_novel"].append(iou_k)
                                rec["correct_novel"].append(correct)

    out: dict[tuple, Metrics] = {}
    for key, rec in accum.items():
        out[key] = Metrics(
            iou_base=float(np.mean(rec["iou_base"])) if rec["iou_base"] else 0.0,
            iou_novel=float(np.mean(rec["iou_novel"])) if rec["iou_novel"] else 0.0,
            acc=float(np.mean(rec["correct"])) if rec["correct"] else 0.0,
            acc_base=float(np.mean(rec["correct_base"])) if rec["correct_base"] else 0.0,
            acc_novel=float(np.mean(rec["correct_novel"])) if rec["correct_novel"] else 0.0,
            counts={
                "instances": len(rec["correct"]),
                "base": len(rec["correct_base"]),
                "novel": len(rec["correct_novel"]),
            },
        )
    return out


def evaluate(
    manifest: DatasetManifest,
    bundle: OpenVocabSam,
    prompt_mode: str = "gt_box",
    classifier: str = "ovsam",
    fusion: bool = True,
) -> Metrics:
    if prompt_mode not in PROMPT_MODES:
        raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
    if classifier not in CLASSIFIERS:
        raise ValueError(f"classifier must be one of {CLASSIFIERS}")
    res = evaluate_matrix(
        bundle, manifest, prompt_modes=(prompt_mode,), classifiers=(classifier,),
        fusion_variants=(fusion,),
    )
    return res[(prompt_mode, classifier, fusion)]


# ---------------------------------------------------------------------------
# Checkpoints (thin wrappers over the archive format)


def save_checkpoint(tensors: dict, path, meta: dict | None = None) -> None:
    save_archive(path, tensors, meta)


def load_checkpoint(path) -> tuple[dict, dict]:
    return load_archive(path)


# ---------------------------------------------------------------------------
# Run configuration and stage orchestration


@dataclass
class RunConfig:
    seed: int = 0
    data_root: str = "data"
    out_dir: str = "out"
    data_scale: float = 1.0
    clip: ClipConfig = field(default_factory=ClipConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @staticmethod
    def from_json(d: dict) -> "RunConfig":
        cfg = RunConfig()
        cfg.seed = d.get("seed", cfg.seed)
        cfg.data_root = d.get("data_root", cfg.data_root)
        cfg.out_dir = d.get("out_dir", cfg.out_dir)
        cfg.data_scale = d.get("data_scale", cfg.data_scale)
        subs = {"clip": cfg.clip, "teacher": cfg.teacher, "adapter": cfg.adapter, "train": cfg.train}
        for name, target in subs.items():
            for k, v in d.get(name, {}).items():
                if name == "train" and k == "weights":
                    cfg.train.weights = LossWeights(**v)
                elif name == "train" and k == "fusion":
                    cfg.train.fusion = FusionConfig(**v)
                elif not hasattr(target, k):
                    raise ValueError(f"unknown {name} config key {k!r}")
                else:
                    setattr(target, k, tuple(v) if isinstance(v, list) else v)
            if "seed" not in d.get(name, {}):
                target.seed = cfg.seed  # stage seeds follow the run seed
        return cfg

    def to_json(self) -> dict:
        return asdict(self)


ARCHIVE_NAMES = {
    "clip": "clip.arch",
    "teacher": "teacher.arch",
    "adapter": "adapter.arch",
    "model": "checkpoint.arch",
}


def stage_gen_data(cfg: RunConfig) -> dict[str, DatasetManifest]:
    return build_datasets(cfg.data_root, cfg.seed, scale=cfg.data_scale)


def stage_pretrain_clip(cfg: RunConfig):
    manifest = load_manifest(cfg.data_root, "clip_pretrain")
    clip, vocab, history = pretrain_clip(manifest, cfg.clip)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_clip(out / ARCHIVE_NAMES["clip"], clip, vocab, history)
    return clip, vocab, history


def stage_train_teacher(cfg: RunConfig):
    manifest = load_manifest(cfg.data_root, "sa_like")
    encoder, decoder, history = train_teacher(manifest, None, cfg.teacher)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_teacher(out / ARCHIVE_NAMES["teacher"], encoder, decoder, history)
    return encoder, decoder, history


def _load_teacher(cfg: RunConfig) -> tuple[TeacherEncoder, PromptableDecoder]:
    tensors, meta = load_archive(Path(cfg.out_dir) / ARCHIVE_NAMES["teacher"])
    enc_cfg = TeacherConfig(**{**cfg.teacher.__dict__, **meta.get("config", {})})
    encoder = TeacherEncoder(enc_cfg)
    decoder = PromptableDecoder(dim=enc_cfg.dim, num_heads=enc_cfg.heads)
    enc_state = {
        k[len("teacher.") :]: torch.from_numpy(np.array(v))
        for k, v in tensors.items()
        if k.startswith("teacher.")
    }
    dec_state = {
        k[len("decoder.") :]: torch.from_numpy(np.array(v))
        for k, v in tensors.items()
        if k.startswith("decoder.")
    }
    encoder.load_state_dict(enc_state)
    decoder.load_state_dict(dec_state)
    encoder.eval()
    decoder.eval()
    return encoder, decoder


def stage_distill(cfg: RunConfig):
    clip, vocab, _ = load_clip(Path(cfg.out_dir) / ARCHIVE_NAMES["clip"])
    teacher, _decoder = _load_teacher(cfg)
    for p in teacher.parameters():
        p.requires_grad_(False)
    manifest = load_manifest(cfg.data_root, "sa_like")
    adapter, history = run_distillation(
        manifest, clip, teacher, cfg.adapter, log_path=Path(cfg.out_dir) / "distill_log.jsonl"
    )
    save_adapter(Path(cfg.out_dir) / ARCHIVE_NAMES["adapter"], adapter, history)
    return adapter, history


def _load_adapter(cfg: RunConfig, clip: MiniClip) -> Sam2ClipAdapter:
    tensors, meta = load_archive(Path(cfg.out_dir) / ARCHIVE_NAMES["adapter"])
    acfg = AdapterConfig(**{**cfg.adapter.__dict__, **meta.get("config", {})})
    adapter = Sam2ClipAdapter(acfg, in_channels=clip.cfg.channels)
    state = {
        k[len("sam2clip.") :]: torch.from_numpy(np.array(v))
        for k, v in tensors.items()
        if k.startswith("sam2clip.")
    }
    adapter.load_state_dict(state)
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    return adapter


def stage_train_joint(cfg: RunConfig) -> OpenVocabSam:
    clip, vocab, _ = load_clip(Path(cfg.out_dir) / ARCHIVE_NAMES["clip"])
    adapter = _load_adapter(cfg, clip)
    _teacher, decoder = _load_teacher(cfg)
    seg = load_manifest(cfg.data_root, "seg_labeled")
    cls = load_manifest(cfg.data_root, "cls_only")
    decoder, head, _history = train_joint(
        seg, cls, clip, vocab, adapter, decoder, None, cfg.train
    )
    bundle = assemble(clip, vocab, adapter, decoder, head, cfg.train.fusion)
    bundle.save(Path(cfg.out_dir) / ARCHIVE_NAMES["model"])
    return bundle


def stage_eval(
    cfg: RunConfig,
    prompt_mode: str = "gt_box",
    classifier: str = "ovsam",
    fusion: bool = True,
    write_report: bool = False,
) -> Metrics:
    bundle = OpenVocabSam.load(Path(cfg.out_dir) / ARCHIVE_NAMES["model"])
    manifest = load_manifest(cfg.data_root, "eval")
    metrics = evaluate(manifest, bundle, prompt_mode, classifier, fusion)
    out = Path(cfg.out_dir)
    with open(out / "metrics.json", "w") as f:
        json.dump(metrics.to_json(), f, indent=2, sort_keys=True)
    if write_report:
        write_comparison_report(bundle, manifest, out / "report.md")
    return metrics


def run_all_stages(cfg: RunConfig, force: bool = False) -> dict:
    """Run every missing stage (idempotent by artifact presence). Each
    stage writes its archive plus a small history JSON next to it.
    Returns the stage histories."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    histories: dict = {}

    def hist_path(stage: str) -> Path:
        return out / f"{stage}_history.json"

    def dump(stage: str, hist: dict) -> None:
        with open(hist_path(stage), "w") as f:
            json.dump(hist, f, indent=2, default=float)
        histories[stage] = hist

    if force or not Path(cfg.data_root, "eval", "manifest.json").exists():
        stage_gen_data(cfg)
    if force or not (out / ARCHIVE_NAMES["clip"]).exists():
        _, _, hist = stage_pretrain_clip(cfg)
        dump("clip", hist)
    if force or not (out / ARCHIVE_NAMES["teacher"]).exists():
        _, _, hist = stage_train_teacher(cfg)
        dump("teacher", hist)
    if force or not (out / ARCHIVE_NAMES["adapter"]).exists():
        _, hist = stage_distill(cfg)
        dump("distill", hist)
    if force or not (out / ARCHIVE_NAMES["model"]).exists():
        clip, vocab, _ = load_clip(out / ARCHIVE_NAMES["clip"])
        adapter = _load_adapter(cfg, clip)
        _teacher, decoder = _load_teacher(cfg)
        seg = load_manifest(cfg.data_root, "seg_labeled")
        cls = load_manifest(cfg.data_root, "cls_only")
        decoder, head, hist = train_joint(
            seg, cls, clip, vocab, adapter, decoder, None, cfg.train
        )
        bundle = assemble(clip, vocab, adapter, decoder, head, cfg.train.fusion)
        bundle.save(out / ARCHIVE_NAMES["model"])
        dump("joint", hist)

    for stage in ("clip", "teacher", "distill", "joint"):
        if stage not in histories and hist_path(stage).exists():
            with open(hist_path(stage)) as f:
                histories[stage] = json.load(f)
    return histories


def run_pipeline_metrics(cfg: RunConfig) -> dict:
    """Full pipeline + a fixed evaluation matrix; returns metrics keyed by
    '<prompt_mode>/<classifier>/<fused|unfused>' (used by the determinism
    check and the CLI report path)."""
    run_all_stages(cfg)
    bundle = OpenVocabSam.load(Path(cfg.out_dir) / ARCHIVE_NAMES["model"])
    manifest = load_manifest(cfg.data_root, "eval")
    res = evaluate_matrix(
        bundle,
        manifest,
        prompt_modes=("gt_box", "center_point"),
        classifiers=("ovsam",),
        fusion_variants=(True, False),
    )
    out = {}
    for (mode, cls_name, fus), m in res.items():
        out[f"{mode}/{cls_name}/{'fused' if fus else 'unfused'}"] = m.to_json()
    path = Path(cfg.out_dir) / "metrics.json"
    with open(path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    return out


def write_comparison_report(bundle: OpenVocabSam, manifest: DatasetManifest, path) -> None:
    res = evaluate_matrix(
        bundle,
        manifest,
        prompt_modes=("gt_box", "center_point"),
        classifiers=("ovsam", "image_crop", "feature_crop"),
        fusion_variants=(True, False),
    )
    lines = [
        "# Evaluation report",
        "",
        "Learnable-context baseline variants are out of scope; rows cover the",
        "unified model (fused and unfused) and the two frozen baselines.",
        "",
        "| prompt | classifier | fusion | IoU base | IoU novel | Acc | Acc base | Acc novel |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for (mode, cls_name, fus), m in sorted(res.items()):
        if cls_name != "ovsam" and not fus:
            continue  # baselines have no fusion knob
        lines.append(
            f"| {mode} | {cls_name} | {'on' if fus else 'off'} "
            f"| {m.iou_base:.4f} | {m.iou_novel:.4f} | {m.acc:.4f} "
            f"| {m.acc_base:.4f} | {m.acc_novel:.4f} |"
        )
    Path(path).write_text("\n".join(lines) + "\n")
