"""Training losses: soft Dice, stabilized mask BCE, classification CE,
IoU-confidence regression, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_cls: float = 4.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    lambda_iou: float = 1.0

    def validate(self) -> None:
        if min(self.lambda_cls, self.lambda_ce, self.lambda_dice, self.lambda_iou) < 0:
            raise ValueError("loss weights must be non-negative")


def dice_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft dice on sigmoid probabilities: 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps)."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {target.shape}")
    p = torch.sigmoid(logits)
    t = target.to(p.dtype)
    num = 2.0 * (p * t).sum() + eps
    den = p.sum() + t.sum() + eps
    return 1.0 - num / den


def mask_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy in log-sum-exp form."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {target.shape}")
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def cls_loss(logits: torch.Tensor, target: int | torch.Tensor) -> torch.Tensor:
    """-log softmax(logits)[target], stabilized. logits: (C,) or (N, C)."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    t = torch.as_tensor(target, device=logits.device).reshape(-1)
    if int(t.max()) >= logits.shape[-1] or int(t.min()) < 0:
        raise ValueError(f"target {target} out of range for {logits.shape[-1]} classes")
    return F.cross_entropy(logits, t)


def iou_regression_loss(iou_pred: torch.Tensor, realized_iou: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(iou_pred, realized_iou.to(iou_pred.dtype))


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum of {"cls", "ce", "dice", "iou"} components (missing
    components contribute zero). Raises on non-finite inputs."""
    weights.validate()
    lambdas = {
        "cls": weights.lambda_cls,
        "ce": weights.lambda_ce,
        "dice": weights.lambda_dice,
        "iou": weights.lambda_iou,
    }
    total = torch.zeros((), dtype=torch.float32)
    for name, value in components.items():
        if name not in lambdas:
            raise ValueError(f"unknown loss component {name!r}")
        if not torch.isfinite(value):
            raise ValueError(f"non-finite loss component {name!r}")
        total = total + lambdas[name] * value
    return total
