"""Combined cross-entropy / dice objective for mask prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

CLAMP_LO = 1e-7
CLAMP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class LossConfig:
    bce_weight: float = 0.3
    dice_eps: float = 1e-6


def _target_array(target, dtype):
    # accept raw arrays or raster objects exposing .data
    data = getattr(target, "data", target)
    arr = np.asarray(data)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _ordered_sum(t: Tensor) -> Tensor:
    # summing in sorted order makes the reduction a function of the value
    # multiset, so identical pixel permutations of pred/gt can't change the
    # result by an ulp
    total = np.sort(t.data, axis=None).sum()
    out = Tensor(np.asarray(total, dtype=t.data.dtype), parents=(t,))

    def bwd(g):
        t._accumulate(np.broadcast_to(g, t.shape).copy())
    out._backward = bwd if out.requires_grad else None
    return out


def combo_loss(pred: Tensor, target, config: LossConfig = LossConfig()):
    """Weighted BCE minus weighted dice over probability masks.

    pred holds probabilities in [0, 1], shape [H, W] or [B, H, W]; target is
    a binary array (or raster) of the same shape.  Returns a scalar Tensor:

        bce_weight * BCE  -  (1 - bce_weight) * dice

    so a perfect prediction drives the value toward -(1 - bce_weight).
    """
    y = _target_array(target, pred.data.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"target shape {y.shape} vs pred {pred.shape}")
    lam = config.bce_weight
    eps = config.dice_eps

    p = pred.clamp(CLAMP_LO, CLAMP_HI)
    yt = Tensor(y)
    one = Tensor(np.ones_like(y))
    pixel_bce = -(yt * p.log() + (one - yt) * (one - p).log())
    bce = _ordered_sum(pixel_bce) * (1.0 / y.size)

    inter = _ordered_sum(p * yt)
    denom = _ordered_sum(p) + float(y.sum() + eps)
    dice = (inter * 2.0 + eps) * denom.reciprocal()

    return bce * lam - dice * (1.0 - lam)
