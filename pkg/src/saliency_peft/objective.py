"""Training objective: binary cross entropy plus soft IoU."""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-7


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    iou: torch.Tensor
    total: torch.Tensor

    def as_row(self) -> tuple[float, float, float]:
        return float(self.bce.detach()), float(self.iou.detach()), float(self.total.detach())


def _check(m: torch.Tensor, g: torch.Tensor) -> None:
    if m.shape != g.shape:
        raise ValueError(f"prediction shape {tuple(m.shape)} != ground truth shape {tuple(g.shape)}")


def bce_loss(m: torch.Tensor, g: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over pixels of ``-[g log m + (1 - g) log(1 - m)]`` with m clamped to [eps, 1 - eps]."""
    _check(m, g)
    m = m.clamp(eps, 1 - eps)
    return -(g * torch.log(m) + (1 - g) * torch.log(1 - m)).mean()


def iou_loss(m: torch.Tensor, g: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``1 - (sum mg + eps) / (sum(m + g - mg) + eps)`` over all pixels."""
    _check(m, g)
    inter = (m * g).sum()
    union = (m + g - m * g).sum()
    return 1 - (inter + eps) / (union + eps)


def total_loss(m: torch.Tensor, g: torch.Tensor, bce_weight: float = 1.0, iou_weight: float = 1.0) -> LossBreakdown:
    bce = bce_loss(m, g)
    iou = iou_loss(m, g)
    return LossBreakdown(bce, iou, bce_weight * bce + iou_weight * iou)


def batch_loss(m: torch.Tensor, g: torch.Tensor, bce_weight: float = 1.0, iou_weight: float = 1.0) -> LossBreakdown:
    """Loss for a ``(B, ...)`` batch: pixel-mean BCE, IoU averaged over images."""
    _check(m, g)
    bce = bce_loss(m, g)
    iou = torch.stack([iou_loss(mi, gi) for mi, gi in zip(m, g)]).mean()
    return LossBreakdown(bce, iou, bce_weight * bce + iou_weight * iou)
