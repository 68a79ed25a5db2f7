"""Training objective: binary cross-entropy plus soft Dice, equally weighted."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, record

EPS = 1e-7


def _target(y, like: Tensor) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != like.shape:
        raise ValueError(f"target shape {y.shape} != prediction shape {like.shape}")
    return y.astype(np.float64)


def bce_loss(y, p: Tensor) -> Tensor:
    """Mean over voxels and channels of ``(y-1)log(1-p) - y log p``, with p clamped to [eps, 1-eps]."""
    p = as_tensor(p)
    yt = _target(y, p)
    pd = p.data.astype(np.float64)
    pc = np.clip(pd, EPS, 1.0 - EPS)
    n = pd.size
    val = np.sum((yt - 1.0) * np.log1p(-pc) - yt * np.log(pc)) / n

    def backward(g):
        inside = (pd >= EPS) & (pd <= 1.0 - EPS)
        d = ((1.0 - yt) / (1.0 - pc) - yt / pc) / n
        return (None, (float(g) * d * inside).astype(p.dtype))

    return record(np.asarray(val, dtype=p.dtype), (as_tensor(y), p), backward)


def dice_loss(y, p: Tensor) -> Tensor:
    """Soft Dice with +1 smoothing, per channel over all voxels, averaged over channels."""
    p = as_tensor(p)
    yt = _target(y, p)
    pd = p.data.astype(np.float64)
    c = p.shape[0]
    y2, p2 = yt.reshape(c, -1), pd.reshape(c, -1)
    inter = np.einsum("ij,ij->i", y2, p2)
    denom = y2.sum(axis=1) + p2.sum(axis=1) + 1.0
    num = 2.0 * inter + 1.0
    val = np.mean(1.0 - num / denom)

    def backward(g):
        d = -(2.0 * y2 * denom[:, None] - num[:, None]) / denom[:, None] ** 2 / c
        return (None, (float(g) * d).reshape(p.shape).astype(p.dtype))

    return record(np.asarray(val, dtype=p.dtype), (as_tensor(y), p), backward)


@dataclass
class LossValue:
    total: Tensor
    bce: Tensor
    dice: Tensor

    def as_floats(self) -> tuple[float, float, float]:
        return self.total.item(), self.bce.item(), self.dice.item()


def combined_loss(y, p: Tensor) -> LossValue:
    bce = bce_loss(y, p)
    dice = dice_loss(y, p)
    total = bce * 0.5 + dice * 0.5
    return LossValue(total, bce, dice)


def one_hot_targets(mask: np.ndarray) -> np.ndarray:
    """Label volume {0,1,2} -> two binary channels (GTVp, GTVn)."""
    mask = np.asarray(mask)
    return np.stack([mask == 1, mask == 2]).astype(np.float32)
