"""Differentiable operations on :class:`~jacseg.tensor.Tensor`.

All 4-D ops use the batch x channel x height x width layout. Each function
computes its forward result with numpy and registers a closure returning the
gradient for every parent, in parent order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "add",
    "sub",
    "hadamard",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "BatchNormState",
    "batchnorm",
    "maxpool2d",
    "upsample_bilinear",
    "concat",
    "slice_axis",
    "scale_channels",
    "sum",
    "mean",
]


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return Tensor._from_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via an im2col matrix product.

    Output extent per axis is ``(H + 2 * padding - k) // stride + 1``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError("conv2d: negative padding")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected order-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    cols2d = cols.reshape(n * ho * wo, c * kh * kw)
    w2d = kernel.data.reshape(o, -1)
    out = cols2d @ w2d.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2d.T @ cols2d).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2d.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2d @ w2d).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of a BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    name: str = field(default="bn")

    @classmethod
    def create(cls, channels: int, name: str = "bn", momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        if channels < 1:
            raise ValueError("batch norm needs at least one channel")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma", dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta", dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
            name=name,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over the (batch, height, width) axes.

    In training mode the batch statistics are used and the running estimates
    are updated as ``running = momentum * running + (1 - momentum) * batch``;
    in inference mode the running estimates are used unchanged.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm: expected order-4 input, got {x.shape}")
    if x.shape[1] != state.channels:
        raise ValueError(f"batchnorm: input has {x.shape[1]} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    gd = gamma.data.reshape(1, -1, 1, 1)
    bd = beta.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(1, -1, 1, 1)
        var = (centered * centered).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv.reshape(1, -1, 1, 1)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean = (state.momentum * state.running_mean + (1 - state.momentum) * mu).astype(x.dtype)
        state.running_var = (state.momentum * state.running_var + (1 - state.momentum) * unbiased).astype(x.dtype)

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd
            gx = (inv.reshape(1, -1, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(1, -1, 1, 1)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(1, -1, 1, 1)
            )
            return gx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)

        def backward(g):
            return g * gd * inv.reshape(1, -1, 1, 1), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * gd + bd).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x, gamma, beta), backward, "batchnorm")


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element of each window."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"maxpool2d: window {window} larger than spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]
    stacked = np.stack(
        [x.data[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] for i, j in offsets], axis=-1
    )
    arg = stacked.argmax(axis=-1)
    out = np.take_along_axis(stacked, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == k)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


@lru_cache(maxsize=64)
def _interp_matrix(size: int, factor: int, dtype_str: str) -> np.ndarray:
    # half-pixel centres, clamped at the borders; rows sum to one
    out = size * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    mat = np.zeros((out, size))
    np.add.at(mat, (np.arange(out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(out), hi), frac)
    mat = mat.astype(dtype_str)
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor with fixed interpolation weights."""
    if factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear: expected order-4 input, got {x.shape}")
    if factor == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    _, _, h, w = x.shape
    uh = _interp_matrix(h, factor, x.dtype.str)
    uw = _interp_matrix(w, factor, x.dtype.str)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return Tensor._from_op(out, (x,), backward, "upsample_bilinear")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise ValueError(f"slice_axis: invalid range [{start}, {stop}) for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor._from_op(x.data[index].copy(), (x,), backward, "slice_axis")


def scale_channels(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each channel of an order-4 tensor by a per-channel weight."""
    if x.ndim != 4 or weights.shape != (x.shape[1],):
        raise ValueError(f"scale_channels: weights {weights.shape} do not match channels of {x.shape}")
    wd = weights.data.reshape(1, -1, 1, 1)
    xd = x.data

    def backward(g):
        return g * wd, (g * xd).sum(axis=(0, 2, 3))

    return Tensor._from_op(xd * wd, (x, weights), backward, "scale_channels")
