"""Lightweight promptable mask decoder shared by the teacher and the
unified model.

Points and boxes are encoded as sparse tokens (random-Fourier positional
features plus learned type embeddings), concatenated with the learned
IoU / mask / label tokens, and refined by a two-layer two-way transformer
against the stride-16 image features. The mask token parameterizes a
dynamic linear classifier over the upscaled per-pixel embedding; the IoU
token predicts mask confidence; the label token is consumed by the
recognition head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ops import Attention, Mlp, bilinear_resize
from .rng import CounterRng

FOURIER_SEED = 0x0F0E_77E5
TOKEN_ORDER = ("iou", "mask", "label")  # prompt tokens follow


@dataclass(frozen=True)
class Prompt:
    kind: str  # "point" | "box"
    coords: tuple  # point: (x, y); box: (x1, y1, x2, y2)
    is_fg: bool = True

    @staticmethod
    def point(x: float, y: float, is_fg: bool = True) -> "Prompt":
        return Prompt(kind="point", coords=(float(x), float(y)), is_fg=is_fg)

    @staticmethod
    def box(x1: float, y1: float, x2: float, y2: float) -> "Prompt":
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate box ({x1},{y1},{x2},{y2})")
        return Prompt(kind="box", coords=(float(x1), float(y1), float(x2), float(y2)))


class FourierPositionEncoding(nn.Module):
    """Random-Fourier features of normalized [0,1]^2 coordinates.

    The Gaussian projection matrix is generated from a fixed counter-based
    seed so the encoding is identical across processes and platforms.
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("PE dim must be even")
        rng = CounterRng(FOURIER_SEED)
        mat = torch.tensor(
            [[rng.normal() for _ in range(2)] for _ in range(dim // 2)],
            dtype=torch.float32,
        )
        self.register_buffer("matrix", mat)
        self.clamped = False  # set when out-of-range coords were clamped

    def forward(self, xy: torch.Tensor) -> torch.Tensor:
        """xy: (..., 2) in [0,1]; returns (..., dim)."""
        if bool((xy < 0).any() or (xy > 1).any()):
            self.clamped = True
            xy = xy.clamp(0.0, 1.0)
        proj = 2.0 * torch.pi * xy @ self.matrix.T.to(xy.dtype)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class TwoWayLayer(nn.Module):
    """token self-attn -> token-to-image cross-attn -> MLP -> image-to-token."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, 2 * dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, feats, token_pe, feat_pe):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + token_pe
        k = feats + feat_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, feats))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + token_pe
        k = feats + feat_pe
        feats = self.norm4(feats + self.cross_i2t(k, q, tokens))
        return tokens, feats


@dataclass
class MaskPrediction:
    mask_logits: torch.Tensor  # B x H x W
    iou_pred: torch.Tensor  # B
    label_token_out: torch.Tensor  # B x d
    mask_token_out: torch.Tensor  # B x d


class PromptableDecoder(nn.Module):
    def __init__(self, dim: int = 64, num_heads: int = 4, depth: int = 2):
        super().__init__()
        self.dim = dim
        self.pe = FourierPositionEncoding(dim)
        self.point_type = nn.Embedding(2, dim)  # 0 = bg, 1 = fg
        self.corner_type = nn.Embedding(2, dim)  # 0 = top-left, 1 = bottom-right
        self.pad_token = nn.Parameter(torch.zeros(dim))
        self.iou_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.label_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.layers = nn.ModuleList(TwoWayLayer(dim, num_heads) for _ in range(depth))
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 2, kernel_size=2, stride=2),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 2, dim // 4, kernel_size=2, stride=2),
        )
        self.hyper_mlp = Mlp(dim, dim, dim // 4, num_layers=3)
        self.iou_mlp = Mlp(dim, dim, 1, num_layers=3)

    # -- prompt encoding -----------------------------------------------------

    def encode_point_prompts(
        self, points: list[tuple[float, float, bool]], image_hw: tuple[int, int]
    ) -> torch.Tensor:
        """One token per (x, y, is_fg) point; returns (N, 1, dim)."""
        if not points:
            raise ValueError("empty point prompt set")
        h, w = image_hw
        xy = torch.tensor([[x / w, y / h] for x, y, _ in points], dtype=torch.float32)
        types = torch.tensor([1 if fg else 0 for _, _, fg in points], dtype=torch.long)
        tok = self.pe(xy) + self.point_type(types)
        return tok.unsqueeze(1)

    def encode_box_prompts(
        self, boxes: list[tuple[float, float, float, float]], image_hw: tuple[int, int]
    ) -> torch.Tensor:
        """Two corner tokens per box; returns (N, 2, dim)."""
        if not boxes:
            raise ValueError("empty box prompt set")
        h, w = image_hw
        for b in boxes:
            if b[2] <= b[0] or b[3] <= b[1]:
                raise ValueError(f"degenerate box {b}")
        tl = torch.tensor([[b[0] / w, b[1] / h] for b in boxes], dtype=torch.float32)
        br = torch.tensor([[b[2] / w, b[3] / h] for b in boxes], dtype=torch.float32)
        tok_tl = self.pe(tl) + self.corner_type.weight[0]
        tok_br = self.pe(br) + self.corner_type.weight[1]
        return torch.stack([tok_tl, tok_br], dim=1)

    def encode_prompts(
        self, prompts: list[Prompt], image_hw: tuple[int, int]
    ) -> torch.Tensor:
        """Mixed prompt batch, padded to the max token count with the
        learned pad token; returns (N, T, dim)."""
        if not prompts:
            raise ValueError("empty prompt set")
        per: list[torch.Tensor] = []
        for p in prompts:
            if p.kind == "point":
                x, y = p.coords
                per.append(self.encode_point_prompts([(x, y, p.is_fg)], image_hw)[0])
            elif p.kind == "box":
                per.append(self.encode_box_prompts([p.coords], image_hw)[0])
            else:
                raise ValueError(f"unknown prompt kind {p.kind!r}")
        t_max = max(t.shape[0] for t in per)
        out = self.pad_token.expand(len(per), t_max, self.dim).clone()
        for i, t in enumerate(per):
            out[i, : t.shape[0]] = t
        return out

    # -- decoding ------------------------------------------------------------

    def grid_pe(self, fh: int, fw: int) -> torch.Tensor:
        """Positional encoding of feature-cell centers, (fh*fw, dim)."""
        ys, xs = torch.meshgrid(
            (torch.arange(fh, dtype=torch.float32) + 0.5) / fh,
            (torch.arange(fw, dtype=torch.float32) + 0.5) / fw,
            indexing="ij",
        )
        return self.pe(torch.stack([xs, ys], dim=-1).reshape(-1, 2))

    def two_way_decode(
        self, image_feats: torch.Tensor, sparse: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """image_feats: (B, d, fh, fw); sparse: (B, T, d) prompt tokens.

        Returns (tokens_out (B, 3+T, d) ordered [iou, mask, label,
        prompts...], feats_out (B, d, fh, fw))."""
        b, d, fh, fw = image_feats.shape
        if d != self.dim or sparse.shape[-1] != self.dim:
            raise ValueError("feature/token dim mismatch")
        fixed = torch.stack([self.iou_token, self.mask_token, self.label_token])
        tokens = torch.cat([fixed.expand(b, 3, d), sparse], dim=1)
        token_pe = tokens  # initial embeddings double as query PE (SAM recipe)
        feats = image_feats.flatten(2).transpose(1, 2)  # B, N, d
        feat_pe = self.grid_pe(fh, fw).unsqueeze(0).expand(b, fh * fw, d)
        for layer in self.layers:
            tokens, feats = layer(tokens, feats, token_pe, feat_pe)
        return tokens, feats.transpose(1, 2).reshape(b, d, fh, fw)

    def predict_mask(
        self, feats_out: torch.Tensor, tokens_out: torch.Tensor, image_hw: tuple[int, int]
    ) -> MaskPrediction:
        """Dynamic-linear-classifier mask logits at image resolution."""
        b = feats_out.shape[0]
        pixel_emb = self.upscale(feats_out)  # B, d/4, 4*fh, 4*fw
        weights = self.hyper_mlp(tokens_out[:, 1])  # mask token -> B, d/4
        low = torch.einsum("bc,bchw->bhw", weights, pixel_emb)
        logits = bilinear_resize(low.unsqueeze(1), *image_hw).squeeze(1)
        iou_pred = torch.sigmoid(self.iou_mlp(tokens_out[:, 0])).squeeze(-1)
        return MaskPrediction(
            mask_logits=logits,
            iou_pred=iou_pred,
            label_token_out=tokens_out[:, 2],
            mask_token_out=tokens_out[:, 1],
        )

    def forward(
        self, image_feats: torch.Tensor, prompts: list[Prompt], image_hw: tuple[int, int]
    ) -> MaskPrediction:
        """image_feats: (d, fh, fw) for one image, or (N, d, fh, fw) with
        one feature map per prompt."""
        sparse = self.encode_prompts(prompts, image_hw)
        if image_feats.dim() == 3:
            image_feats = image_feats.unsqueeze(0).expand(
                len(prompts), *image_feats.shape
            )
        tokens_out, feats_out = self.two_way_decode(image_feats, sparse)
        return self.predict_mask(feats_out, tokens_out, image_hw)


def binarize(mask_logits: torch.Tensor, threshold: float = 0.0) -> torch.Tensor:
    """Logit threshold 0.0 == probability 0.5."""
    return (mask_logits > threshold).to(torch.uint8)
