"""Recognition head: light FPN over the frozen pyramid, RoI-Align region
extraction, a conv+MLP embedding aligned to the text space, the frozen
mask-pooled score branch, and geometric-mean score fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decoder import Prompt
from .mini_clip import MiniClip, PyramidFeatures, Vocabulary, zero_shot_scores
from .ops import Mlp, bilinear_sample
from .synthdata import mask_to_box

# classify_region shares the cosine-softmax implementation with the
# zero-shot scorer; tests assert object identity.
cosine_scores = zero_shot_scores

PROB_FLOOR = 1e-12


class ZeroAreaBoxError(ValueError):
    pass


@dataclass
class FusionConfig:
    alpha_base: float = 0.65
    alpha_novel: float = 0.35
    tau_region: float = 25.0

    def validate(self) -> None:
        if not (0.0 <= self.alpha_base <= 1.0 and 0.0 <= self.alpha_novel <= 1.0):
            raise ValueError("fusion alphas must lie in [0, 1]")
        if self.tau_region <= 0:
            raise ValueError("tau_region must be positive")


@dataclass
class LabelDistribution:
    probs: np.ndarray  # C, sums to 1
    source: str  # "learned" | "frozen" | "fused"
    flagged: bool = False

    def validate(self) -> None:
        if (self.probs < 0).any() or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("label distribution must be a probability vector")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class FpnMaps:
    stride8: torch.Tensor
    stride16: torch.Tensor
    stride32: torch.Tensor

    def at_level(self, level: int) -> tuple[torch.Tensor, int]:
        return [
            (self.stride8, 8),
            (self.stride16, 16),
            (self.stride32, 32),
        ][level]


class LightFpn(nn.Module):
    """Lateral 1x1 projections + nearest x2 top-down additions + 3x3 output
    convs; uniform channel width."""

    def __init__(self, in_channels=(32, 64, 128), d_f: int = 64):
        super().__init__()
        self.lateral1 = nn.Conv2d(in_channels[0], d_f, 1)
        self.lateral2 = nn.Conv2d(in_channels[1], d_f, 1)
        self.lateral3 = nn.Conv2d(in_channels[2], d_f, 1)
        self.out1 = nn.Conv2d(d_f, d_f, 3, padding=1)
        self.out2 = nn.Conv2d(d_f, d_f, 3, padding=1)
        self.out3 = nn.Conv2d(d_f, d_f, 3, padding=1)

    def forward(self, feats: PyramidFeatures) -> FpnMaps:
        p3 = self.lateral3(feats.level3)
        p2 = self.lateral2(feats.level2) + F.interpolate(p3, scale_factor=2, mode="nearest")
        p1 = self.lateral1(feats.level1) + F.interpolate(p2, scale_factor=2, mode="nearest")
        return FpnMaps(
            stride8=self.out1(p1), stride16=self.out2(p2), stride32=self.out3(p3)
        )


def roi_align(
    fmap: torch.Tensor,
    box: tuple[float, float, float, float],
    stride: int,
    out_size: int = 7,
    samples: int = 2,
) -> torch.Tensor:
    """Average-of-bilinear-samples RoI pooling.

    fmap: (C, fh, fw). The box (image coordinates) is clipped to the image,
    mapped to feature coordinates by dividing by stride (no rounding), and
    split into out_size^2 bins; each bin averages samples x samples
    bilinear point samples at regular offsets (s + 0.5) / samples. Feature
    cell k spans [k, k+1) with its value at the cell center k + 0.5.
    """
    c, fh, fw = fmap.shape
    img_w, img_h = fw * stride, fh * stride
    x1 = min(max(float(box[0]), 0.0), img_w)
    y1 = min(max(float(box[1]), 0.0), img_h)
    x2 = min(max(float(box[2]), 0.0), img_w)
    y2 = min(max(float(box[3]), 0.0), img_h)
    if x2 <= x1 or y2 <= y1:
        raise ZeroAreaBoxError(f"box {box} has zero area after clipping")
    fx1, fy1 = x1 / stride, y1 / stride
    bw = (x2 - x1) / stride / out_size
    bh = (y2 - y1) / stride / out_size
    offs = (torch.arange(samples, dtype=torch.float32) + 0.5) / samples
    gx = fx1 + (torch.arange(out_size, dtype=torch.float32).reshape(-1, 1) + offs) * bw
    gy = fy1 + (torch.arange(out_size, dtype=torch.float32).reshape(-1, 1) + offs) * bh
    xs = gx.reshape(1, out_size, 1, samples).expand(out_size, out_size, samples, samples)
    ys = gy.reshape(out_size, 1, samples, 1).expand(out_size, out_size, samples, samples)
    vals = bilinear_sample(fmap, xs - 0.5, ys - 0.5)  # C, oy, ox, sy, sx
    return vals.mean(dim=(-2, -1))


def assign_fpn_level(box: tuple[float, float, float, float]) -> int:
    """k = clamp(floor(2 + log2(sqrt(area) / 56)), 0, 2): small boxes read
    the stride-8 map, large boxes the stride-32 map."""
    area = max(0.0, float(box[2]) - float(box[0])) * max(0.0, float(box[3]) - float(box[1]))
    if area <= 0:
        return 0
    k = math.floor(2.0 + math.log2(math.sqrt(area) / 56.0))
    return int(min(max(k, 0), 2))


def prompt_to_region(
    prompt: Prompt,
    pred_mask: np.ndarray | None,
    image_hw: tuple[int, int],
    fallback_window: int = 16,
) -> tuple[tuple[float, float, float, float], bool]:
    """Box prompts pass through; point prompts take the tight box of the
    predicted mask, falling back to a flagged centered window when the
    predicted mask is empty."""
    if prompt.kind == "box":
        return prompt.coords, False
    if pred_mask is None:
        raise ValueError("point prompts need a decoded mask")
    h, w = image_hw
    if int(pred_mask.sum()) > 0:
        return tuple(float(v) for v in mask_to_box(pred_mask)), False
    x, y = prompt.coords
    half = fallback_window / 2.0
    x1 = min(max(x - half, 0.0), w - 1.0)
    y1 = min(max(y - half, 0.0), h - 1.0)
    x2 = min(x1 + fallback_window, float(w))
    y2 = min(y1 + fallback_window, float(h))
    return (x1, y1, x2, y2), True


class RegionHead(nn.Module):
    """3x3 conv + GELU over the RoI, pooled, concatenated with the label
    token, then a 2-layer MLP into the normalized text space."""

    def __init__(self, d_f: int = 64, d_token: int = 64, d_t: int = 64, conv_channels: int = 128):
        super().__init__()
        self.conv = nn.Conv2d(d_f, conv_channels, 3, padding=1)
        self.mlp = Mlp(conv_channels + d_token, 2 * d_t, d_t)

    def forward(self, roi: torch.Tensor, label_token_out: torch.Tensor) -> torch.Tensor:
        """roi: (B, d_f, S, S); label_token_out: (B, d_token) -> (B, d_t) unit."""
        pooled = F.gelu(self.conv(roi)).mean(dim=(-2, -1))
        emb = self.mlp(torch.cat([pooled, label_token_out], dim=-1))
        return F.normalize(emb, dim=-1)


class Clip2Sam(nn.Module):
    def __init__(self, in_channels=(32, 64, 128), d_f: int = 64, d_t: int = 64):
        super().__init__()
        self.fpn = LightFpn(in_channels, d_f)
        self.head = RegionHead(d_f, d_f, d_t)

    def build_fpn(self, feats: PyramidFeatures) -> FpnMaps:
        return self.fpn(feats)

    def region_embedding(
        self,
        maps: FpnMaps,
        boxes: list[tuple],
        label_tokens: torch.Tensor,
        batch_idx=None,
        drop: str | None = None,
    ) -> torch.Tensor:
        """RoI per box from its assigned level; maps may be batched, with
        batch_idx giving each box's image row. drop ("roi" | "token")
        zeroes one input path during training so both learn to carry the
        class signal."""
        rois = []
        for i, box in enumerate(boxes):
            level = assign_fpn_level(box)
            fmap, stride = maps.at_level(level)
            if fmap.dim() == 4:
                fmap = fmap[0 if batch_idx is None else batch_idx[i]]
            rois.append(roi_align(fmap, box, stride))
        roi = torch.stack(rois)
        if drop == "roi":
            roi = torch.zeros_like(roi)
        elif drop == "token":
            label_tokens = torch.zeros_like(label_tokens)
        return self.head(roi, label_tokens)


def classify_region(
    region_emb: torch.Tensor, vocab: Vocabulary, tau_region: float
) -> LabelDistribution:
    """Cosine-softmax over the vocabulary (shared with zero-shot scoring)."""
    text = torch.as_tensor(vocab.embeddings, dtype=region_emb.dtype)
    probs = cosine_scores(region_emb, text, tau_region)
    return LabelDistribution(probs=probs.detach().numpy(), source="learned")


def region_logits(
    region_emb: torch.Tensor, text_embs: torch.Tensor, tau_region: float
) -> torch.Tensor:
    """tau-scaled cosine logits (training path; softmax is taken by the loss)."""
    return tau_region * region_emb @ text_embs.T


def frozen_scores(
    feats: PyramidFeatures, mask: np.ndarray, clip: MiniClip, vocab: Vocabulary
) -> LabelDistribution:
    """Mask-pooled frozen-backbone scores: the mask is reduced to the
    stride-32 grid (cells with >= 50% coverage), level3 is average-pooled
    over those cells, projected and scored with the frozen temperature.
    An empty downsampled mask yields a flagged uniform distribution."""
    level3 = feats.level3[0] if feats.level3.dim() == 4 else feats.level3
    c3, gh, gw = level3.shape
    h, w = mask.shape
    if h // 32 != gh or w // 32 != gw:
        raise ValueError("mask dims do not match the stride-32 grid")
    coverage = mask.astype(np.float32).reshape(gh, 32, gw, 32).mean(axis=(1, 3))
    selected = torch.from_numpy(coverage >= 0.5)
    n_classes = len(vocab)
    if int(mask.sum()) == 0 or not bool(selected.any()):
        return LabelDistribution(
            probs=np.full(n_classes, 1.0 / n_classes), source="frozen", flagged=True
        )
    with torch.no_grad():
        pooled = level3[:, selected].mean(dim=1)
        emb = clip.project_pooled(pooled.unsqueeze(0))[0]
        text = torch.from_numpy(vocab.embeddings)
        probs = cosine_scores(emb, text, float(clip.tau))
    return LabelDistribution(probs=probs.numpy(), source="frozen")


def fuse_scores(
    learned: LabelDistribution,
    frozen: LabelDistribution,
    vocab: Vocabulary,
    cfg: FusionConfig | None = None,
) -> LabelDistribution:
    """Per-class geometric mean s_c = learned^alpha_c * frozen^(1-alpha_c),
    alpha by base/novel status, renormalized; inputs floored at 1e-12."""
    cfg = cfg or FusionConfig()
    cfg.validate()
    lp = np.maximum(np.asarray(learned.probs, dtype=np.float64), PROB_FLOOR)
    fp = np.maximum(np.asarray(frozen.probs, dtype=np.float64), PROB_FLOOR)
    if lp.shape != fp.shape or lp.shape[0] != len(vocab):
        raise ValueError("distributions must cover the same vocabulary")
    alpha = np.array(
        [cfg.alpha_base if b else cfg.alpha_novel for b in vocab.is_base]
    )
    fused = lp**alpha * fp ** (1.0 - alpha)
    fused = fused / fused.sum()
    out = LabelDistribution(
        probs=fused, source="fused", flagged=learned.flagged or frozen.flagged
    )
    out.validate()
    return out
