"""Small contrastive vision-language model with a pyramid image encoder.

The image side is a three-stage convolutional encoder emitting features at
strides 8/16/32 (channels 32/64/128). The text side embeds the two content
words of the closed caption grammar "{color} {shape}" with learned token
vectors summed and passed through a two-layer MLP. After contrastive
pretraining the whole model is frozen and acts as the single shared
backbone for all downstream stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthdata
from .archive import load_archive, module_hash, save_archive
from .ops import Mlp, seed_all, to_tensor_image
from .rng import CounterRng
from .synthdata import CLASS_NAMES, COLORS, SHAPES, ClassSplit, DatasetManifest

FILLER_WORDS = {"a", "an", "the", "photo", "of"}


class VocabularyError(ValueError):
    pass


@dataclass
class ClipConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    d_t: int = 64
    tau_init: float = 1.0 / 0.07
    tau_max: float = 100.0
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.channels) <= 0 or self.d_t <= 0 or self.batch_size <= 0:
            raise ValueError("ClipConfig fields must be positive")
        if self.tau_init <= 0 or self.lr <= 0:
            raise ValueError("ClipConfig fields must be positive")


@dataclass
class Vocabulary:
    names: list[str]
    embeddings: np.ndarray  # C x d_t, rows L2-normalized
    is_base: list[bool]

    def validate(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("vocabulary rows must be unit norm")

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class PyramidFeatures:
    level1: torch.Tensor  # B x c1 x H/8  x W/8
    level2: torch.Tensor  # B x c2 x H/16 x W/16
    level3: torch.Tensor  # B x c3 x H/32 x W/32

    def validate(self, image_hw: tuple[int, int]) -> None:
        h, w = image_hw
        for lvl, stride in ((self.level1, 8), (self.level2, 16), (self.level3, 32)):
            if lvl.shape[-2:] != (h // stride, w // stride):
                raise ValueError(f"level at stride {stride} has shape {lvl.shape}")
            if not torch.isfinite(lvl).all():
                raise ValueError("non-finite pyramid values")


def _conv_bn(cin: int, cout: int, stride: int) -> nn.Sequential:
    # BatchNorm, not GroupNorm: per-image statistics suppress the sparse
    # object signal on these mostly-background scenes and stall training
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.BatchNorm2d(cout),
        nn.GELU(),
    )


class PyramidEncoder(nn.Module):
    """Stride-8 stem (three 3x3 stride-2 convs) + two stride-2 stages."""

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(
            _conv_bn(3, 16, 2),
            _conv_bn(16, 24, 2),
            _conv_bn(24, c1, 2),
            _conv_bn(c1, c1, 1),
        )
        self.stage2 = nn.Sequential(_conv_bn(c1, c2, 2), _conv_bn(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv_bn(c2, c3, 2), _conv_bn(c3, c3, 1))

    def forward(self, x: torch.Tensor) -> PyramidFeatures:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W image, got {tuple(x.shape)}")
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ValueError("image dims must be divisible by 32")
        l1 = self.stem(x)
        l2 = self.stage2(l1)
        l3 = self.stage3(l2)
        return PyramidFeatures(level1=l1, level2=l2, level3=l3)


class TextEncoder(nn.Module):
    """Bag-of-two-tokens text head over the color/shape grammar."""

    def __init__(self, d_t: int = 64):
        super().__init__()
        self.color_tokens = nn.Embedding(len(COLORS), d_t)
        self.shape_tokens = nn.Embedding(len(SHAPES), d_t)
        self.mlp = Mlp(d_t, 2 * d_t, d_t)

    @staticmethod
    def parse(name: str) -> tuple[int, int]:
        color_idx = shape_idx = None
        for word in name.lower().split():
            if word in FILLER_WORDS:
                continue
            if word in COLORS:
                color_idx = COLORS.index(word)
            elif word in SHAPES:
                shape_idx = SHAPES.index(word)
            else:
                raise VocabularyError(f"unknown token {word!r} in {name!r}")
        if color_idx is None or shape_idx is None:
            raise VocabularyError(f"name {name!r} needs one color and one shape")
        return color_idx, shape_idx

    def forward(self, names: list[str]) -> torch.Tensor:
        pairs = [self.parse(n) for n in names]
        ci = torch.tensor([p[0] for p in pairs], dtype=torch.long)
        si = torch.tensor([p[1] for p in pairs], dtype=torch.long)
        emb = self.mlp(self.color_tokens(ci) + self.shape_tokens(si))
        return F.normalize(emb, dim=-1)


class MiniClip(nn.Module):
    def __init__(self, cfg: ClipConfig | None = None):
        super().__init__()
        self.cfg = cfg or ClipConfig()
        self.cfg.validate()
        self.encoder = PyramidEncoder(self.cfg.channels)
        self.proj = nn.Linear(self.cfg.channels[2], self.cfg.d_t)
        self.text = TextEncoder(self.cfg.d_t)
        self.log_tau = nn.Parameter(torch.tensor(math.log(self.cfg.tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(max=self.cfg.tau_max)

    def encode_image_pyramid(self, images: torch.Tensor) -> PyramidFeatures:
        return self.encoder(images)

    def global_image_embedding(self, feats: PyramidFeatures) -> torch.Tensor:
        pooled = feats.level3.mean(dim=(-2, -1))  # B x c3
        return F.normalize(self.proj(pooled), dim=-1)

    def project_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        """Shared projection+normalize for externally pooled level3 features."""
        return F.normalize(self.proj(pooled), dim=-1)

    def encode_text(self, names: list[str]) -> torch.Tensor:
        return self.text(names)


def contrastive_loss(
    image_embs: torch.Tensor, text_embs: torch.Tensor, tau: torch.Tensor | float
) -> torch.Tensor:
    """Symmetric InfoNCE over the tau-scaled similarity matrix."""
    n = image_embs.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs N >= 2")
    if isinstance(tau, (int, float)):
        tau = torch.tensor(float(tau), dtype=image_embs.dtype)
    logits = tau * image_embs @ text_embs.T
    targets = torch.arange(n, device=logits.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def zero_shot_scores(
    region_emb: torch.Tensor, text_embs: torch.Tensor, tau: float
) -> torch.Tensor:
    """p_c = softmax over classes of tau * <r, t_c>. Accepts a single
    embedding (d,) or a batch (N, d); normalized inputs assumed."""
    sims = region_emb @ text_embs.T
    return torch.softmax(float(tau) * sims, dim=-1)


def build_vocabulary(clip: MiniClip, class_split: ClassSplit) -> Vocabulary:
    with torch.no_grad():
        embs = clip.encode_text(list(CLASS_NAMES)).numpy().astype(np.float32)
    vocab = Vocabulary(
        names=list(CLASS_NAMES),
        embeddings=embs,
        is_base=[class_split.is_base(i) for i in range(len(CLASS_NAMES))],
    )
    vocab.validate()
    return vocab


# ---------------------------------------------------------------------------
# Pretraining


def _load_split_tensors(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """All images as uint8 (N,H,W,3) plus class ids."""
    images, labels = [], []
    for i in range(len(manifest)):
        img, ann = synthdata.load_scene(manifest, i)
        images.append(np.round(img * 255).astype(np.uint8))
        labels.append(ann["instances"][0]["class_id"])
    return np.stack(images), np.array(labels, dtype=np.int64)


def _batch_images(images_u8: np.ndarray, idx: np.ndarray) -> torch.Tensor:
    batch = torch.from_numpy(images_u8[idx].astype(np.float32) / 255.0)
    return batch.permute(0, 3, 1, 2).contiguous()


def zero_shot_accuracy(
    clip: MiniClip, vocab: Vocabulary, images_u8: np.ndarray, labels: np.ndarray
) -> float:
    text = torch.from_numpy(vocab.embeddings)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), 64):
            idx = np.arange(start, min(start + 64, len(labels)))
            feats = clip.encode_image_pyramid(_batch_images(images_u8, idx))
            emb = clip.global_image_embedding(feats)
            pred = (emb @ text.T).argmax(dim=1).numpy()
            correct += int((pred == labels[idx]).sum())
    return correct / len(labels)


def pretrain_clip(
    manifest: DatasetManifest, cfg: ClipConfig | None = None
) -> tuple[MiniClip, Vocabulary, dict]:
    """Contrastive pretraining on single-object caption pairs.

    Returns the trained (to-be-frozen) model, the class vocabulary, and a
    history dict with per-epoch loss and the held-out zero-shot accuracy.
    """
    cfg = cfg or ClipConfig()
    cfg.validate()
    seed_all(cfg.seed)
    clip = MiniClip(cfg)

    images_u8, labels = _load_split_tensors(manifest)
    captions = [synthdata.class_caption(int(c)) for c in labels]
    n_hold = max(1, int(len(labels) * cfg.holdout_fraction))
    train_idx = np.arange(0, len(labels) - n_hold)
    hold_idx = np.arange(len(labels) - n_hold, len(labels))

    opt = torch.optim.AdamW(clip.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = CounterRng(cfg.seed).derive("clip_batches")
    steps_per_epoch = max(1, len(train_idx) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)

    history: dict = {"epoch_loss": [], "step_loss": []}
    step = 0
    for _epoch in range(cfg.epochs):
        perm = np.array(order_rng.permutation(len(train_idx)))
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = train_idx[perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            if len(idx) < 2:
                continue
            batch = _batch_images(images_u8, idx)
            feats = clip.encode_image_pyramid(batch)
            img_emb = clip.global_image_embedding(feats)
            txt_emb = clip.encode_text([captions[i] for i in idx])
            loss = contrastive_loss(img_emb, txt_emb, clip.tau)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite contrastive loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            epoch_losses.append(float(loss.detach()))
            history["step_loss"].append(float(loss.detach()))
            step += 1
        history["epoch_loss"].append(float(np.mean(epoch_losses)))

    clip.eval()
    for p in clip.parameters():
        p.requires_grad_(False)
    vocab = build_vocabulary(clip, manifest.class_split)
    history["holdout_accuracy"] = zero_shot_accuracy(
        clip, vocab, images_u8[hold_idx], labels[hold_idx]
    )
    history["frozen_hash"] = module_hash(clip)
    return clip, vocab, history


def save_clip(path, clip: MiniClip, vocab: Vocabulary, history: dict | None = None) -> None:
    tensors = {f"clip.{k}": v for k, v in clip.state_dict().items()}
    meta = {
        "kind": "clip",
        "vocab_names": vocab.names,
        "is_base": vocab.is_base,
        "holdout_accuracy": (history or {}).get("holdout_accuracy"),
        "config": {"channels": list(clip.cfg.channels), "d_t": clip.cfg.d_t},
    }
    save_archive(path, tensors, meta)


def load_clip(path) -> tuple[MiniClip, Vocabulary, dict]:
    tensors, meta = load_archive(path)
    cfg = ClipConfig(
        channels=tuple(meta["config"]["channels"]), d_t=meta["config"]["d_t"]
    )
    clip = MiniClip(cfg)
    state = {
        k[len("clip.") :]: torch.from_numpy(np.array(v))
        for k, v in tensors.items()
        if k.startswith("clip.")
    }
    clip.load_state_dict(state)
    clip.eval()
    for p in clip.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        embs = clip.encode_text(meta["vocab_names"]).numpy().astype(np.float32)
    vocab = Vocabulary(names=meta["vocab_names"], embeddings=embs, is_base=meta["is_base"])
    vocab.validate()
    return clip, vocab, meta


def encode_image_pyramid_np(clip: MiniClip, image: np.ndarray) -> PyramidFeatures:
    """Convenience: single H x W x 3 float image -> batch-1 pyramid."""
    with torch.no_grad():
        return clip.encode_image_pyramid(to_tensor_image(image).unsqueeze(0))
