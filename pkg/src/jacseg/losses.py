"""Segmentation losses with analytic gradients.

The Jaccard loss for a probability map ``p`` and a binary target ``y`` is::

    L = 1 - S / D,   S = sum_{y=1} p,   D = |{y=1}| + sum_{y=0} p

with derivative ``-1/D`` at foreground pixels and ``+S/D**2`` at background
pixels. Batched inputs (order >= 3, batch first) reduce as the mean of the
per-image losses.

When an image has no foreground, ``S = 0`` and the loss is 1 whenever any
background probability is positive and 0 when the prediction is identically
zero. Its gradient is zero in both cases, so such images contribute no
training signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor

__all__ = [
    "LossResult",
    "jaccard_loss",
    "cross_entropy_loss",
    "balanced_cross_entropy_loss",
    "deep_supervision_loss",
    "LOSSES",
    "CE_EPS",
]

CE_EPS = 1e-7


@dataclass
class LossResult:
    """Scalar loss value, per-pixel gradient w.r.t. the prediction, and the graph node."""

    value: float
    grad_map: np.ndarray
    tensor: Tensor

    def backward(self) -> None:
        self.tensor.backward()


def _prepare(pred, target):
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("target must be binary")
    if p.data.size and (p.data.min() < 0.0 or p.data.max() > 1.0):
        raise ValueError("prediction values must lie in [0, 1]")
    return p, y.astype(bool)


def _per_image(arr: np.ndarray) -> np.ndarray:
    # order <= 2 is one image; otherwise the leading axis is the batch
    if arr.ndim <= 2:
        return arr.reshape(1, -1)
    return arr.reshape(arr.shape[0], -1)


def _loss_node(p: Tensor, value: float, grad_map: np.ndarray, op: str) -> Tensor:
    gm = grad_map

    def backward(g):
        return (g * gm,)

    return Tensor._from_op(np.asarray(value, dtype=p.dtype), (p,), backward, op)


def jaccard_loss(pred, target) -> LossResult:
    p, y = _prepare(pred, target)
    pd = _per_image(p.data)
    fg = _per_image(y)
    n_fg = fg.sum(axis=1).astype(p.dtype)
    s = np.where(fg, pd, 0.0).sum(axis=1)
    d = n_fg + np.where(fg, 0.0, pd).sum(axis=1)
    safe_d = np.where(d > 0, d, 1.0)
    per = np.where(d > 0, 1.0 - s / safe_d, 0.0)
    g_fg = -1.0 / safe_d
    g_bg = s / safe_d**2
    grad = np.where(fg, g_fg[:, None], g_bg[:, None])
    grad[d == 0] = 0.0
    grad /= pd.shape[0]
    grad = grad.reshape(p.shape).astype(p.dtype)
    value = float(per.mean()) if pd.shape[0] > 1 else float(per[0])
    return LossResult(value, grad, _loss_node(p, value, grad, "jaccard_loss"))


def cross_entropy_loss(pred, target, eps: float = CE_EPS) -> LossResult:
    """Mean per-pixel binary negative log-likelihood with ``pred`` clamped to [eps, 1-eps]."""
    p, y = _prepare(pred, target)
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    m = p.data.size
    value = float(-(np.where(y, np.log(pc), np.log1p(-pc))).sum() / m)
    grad = np.where(y, -1.0 / pc, 1.0 / (1.0 - pc)) * inside / m
    grad = grad.astype(p.dtype)
    return LossResult(value, grad, _loss_node(p, value, grad, "cross_entropy_loss"))


def balanced_cross_entropy_loss(pred, target, eps: float = CE_EPS) -> LossResult:
    """Class-balanced cross entropy.

    Per image, foreground terms are weighted by ``|Y-|/|Y|`` and background
    terms by ``|Y+|/|Y|``; the weighted sum is divided by the total weight,
    and images are averaged. An image lacking either class falls back to
    uniform weights.
    """
    p, y = _prepare(pred, target)
    pd = _per_image(p.data)
    fg = _per_image(y)
    npx = pd.shape[1]
    n_fg = fg.sum(axis=1, keepdims=True)
    beta = (npx - n_fg) / npx
    w = np.where(fg, beta, 1.0 - beta)
    degenerate = (n_fg == 0) | (n_fg == npx)
    w = np.where(degenerate, 1.0, w)
    wsum = w.sum(axis=1, keepdims=True)
    pc = np.clip(pd, eps, 1.0 - eps)
    inside = (pd >= eps) & (pd <= 1.0 - eps)
    nll = -np.where(fg, np.log(pc), np.log1p(-pc))
    per = (w * nll).sum(axis=1) / wsum[:, 0]
    b = pd.shape[0]
    value = float(per.mean())
    grad = (w / wsum) * np.where(fg, -1.0 / pc, 1.0 / (1.0 - pc)) * inside / b
    grad = grad.reshape(p.shape).astype(p.dtype)
    return LossResult(value, grad, _loss_node(p, value, grad, "balanced_cross_entropy_loss"))


LOSSES = {
    "jaccard": jaccard_loss,
    "cross_entropy": cross_entropy_loss,
    "balanced_cross_entropy": balanced_cross_entropy_loss,
}


def deep_supervision_loss(
    side_outputs: Sequence, fused, target, kind: str = "jaccard", weights: Sequence[float] | None = None
) -> LossResult:
    """Weighted sum of the chosen loss over every side output and the fused output.

    ``weights`` lists one weight per side output followed by the fused weight;
    the default is uniform ``1 / (len(side_outputs) + 1)``. ``grad_map`` stacks
    the weighted per-output gradient maps in the same order.
    """
    if kind not in LOSSES:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}")
    outputs = list(side_outputs) + [fused]
    if weights is None:
        weights = [1.0 / len(outputs)] * len(outputs)
    if len(weights) != len(outputs):
        raise ValueError(f"expected {len(outputs)} weights, got {len(weights)}")
    fn = LOSSES[kind]
    total_value = 0.0
    total: Tensor | None = None
    maps = []
    for out, w in zip(outputs, weights):
        part = fn(out, target)
        maps.append(w * part.grad_map)
        if w == 0.0:
            continue
        total_value += w * part.value
        term = F.scale(part.tensor, float(w))
        total = term if total is None else F.add(total, term)
    if total is None:
        p = fused if isinstance(fused, Tensor) else Tensor(fused)
        total = F.scale(fn(p, target).tensor, 0.0)
    return LossResult(total_value, np.stack(maps), total)
