"""Shared tensor ops and small network blocks.

Bilinear convention used everywhere (resize, RoI sampling, mask
upsampling): half-pixel centers. An output pixel X samples the source at

    x_src = (X + 0.5) * (in_size / out_size) - 0.5

and the value is the bilinear interpolation of the four surrounding
source pixels, with coordinates clamped to the border (edge replicate).
For exact x2 upsampling / x0.5 downsampling this matches integrating the
piecewise-bilinear (resp. piecewise-constant) source surface over the
output pixel footprint, which is what the test oracles do.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize (..., H, W) with half-pixel-center bilinear sampling."""
    squeeze = False
    if x.dim() == 3:  # C,H,W
        x = x.unsqueeze(0)
        squeeze = True
    y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return y.squeeze(0) if squeeze else y


def bilinear_sample(feat: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Point-sample feat (C, H, W) at continuous (x, y) pixel-center
    coordinates (pixel i has center i). Border-clamped; differentiable in
    feat. xs/ys may have any matching shape; returns (C, *xs.shape)."""
    c, h, w = feat.shape
    xs = xs.clamp(0.0, w - 1.0)
    ys = ys.clamp(0.0, h - 1.0)
    x0 = xs.floor().clamp(0, w - 1)
    y0 = ys.floor().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = xs - x0
    fy = ys - y0
    x0l, x1l, y0l, y1l = x0.long(), x1.long(), y0.long(), y1.long()
    flat = feat.reshape(c, -1)
    idx = lambda yy, xx: (yy * w + xx).reshape(-1)
    v00 = flat[:, idx(y0l, x0l)]
    v01 = flat[:, idx(y0l, x1l)]
    v10 = flat[:, idx(y1l, x0l)]
    v11 = flat[:, idx(y1l, x1l)]
    fx = fx.reshape(1, -1)
    fy = fy.reshape(1, -1)
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    return out.reshape(c, *xs.shape)


def sinusoidal_pe_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal positional encoding, (h*w, dim). Half the
    channels encode y, half encode x, each with the usual sin/cos ladder."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter) / max(quarter - 1, 1))
    ys = torch.arange(h, dtype=torch.float32).unsqueeze(1) * freqs  # h, q
    xs = torch.arange(w, dtype=torch.float32).unsqueeze(1) * freqs  # w, q
    pe = torch.zeros(h, w, dim)
    pe[:, :, 0::4] = torch.sin(ys).unsqueeze(1).expand(h, w, quarter)
    pe[:, :, 1::4] = torch.cos(ys).unsqueeze(1).expand(h, w, quarter)
    pe[:, :, 2::4] = torch.sin(xs).unsqueeze(0).expand(h, w, quarter)
    pe[:, :, 3::4] = torch.cos(xs).unsqueeze(0).expand(h, w, quarter)
    return pe.reshape(h * w, dim)


class Mlp(nn.Module):
    """num_layers linear layers with GELU between (none after the last)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v inputs.

    Records row-stochastic attention weights in self.last_attn when
    self.record_attn is set (used by instrumentation tests only).
    """

    record_attn = False

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must divide num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.last_attn: torch.Tensor | None = None

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        b, nq, d = q.shape
        nk = k.shape[1]
        hd = self.head_dim
        q = self.q_proj(q).reshape(b, nq, self.num_heads, hd).transpose(1, 2)
        k = self.k_proj(k).reshape(b, nk, self.num_heads, hd).transpose(1, 2)
        v = self.v_proj(v).reshape(b, nk, self.num_heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        if Attention.record_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: x + attn(ln(x)), x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h)
        x = x + self.mlp(self.norm2(x))
        return x


def seed_all(seed: int) -> None:
    torch.manual_seed(seed)


def to_tensor_image(image) -> torch.Tensor:
    """H x W x 3 float array -> 3 x H x W float32 tensor."""
    t = torch.as_tensor(image, dtype=torch.float32)
    return t.permute(2, 0, 1).contiguous()
