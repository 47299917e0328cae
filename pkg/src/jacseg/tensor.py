"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`jacseg.functional`
produce new tensors that remember their parents and a closure computing the
vector-Jacobian product. Every tensor receives a monotonically increasing
sequence number at creation, so sorting the reachable nodes by that number
recovers the exact execution order; :meth:`Tensor.backward` walks it in
reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "SGD",
    "sgd_step",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
]

_counter = itertools.count()
_grad_enabled = True
_default_dtype = np.dtype(np.float64)


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar backward, reuse)."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return leaf tensors."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional real array with optional gradient storage.

    Parameters
    ----------
    data : array_like
        Values. Converted to ``dtype`` (default: the module default dtype).
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    name : str, optional
        Label used by checkpoints and error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensor order {arr.ndim} exceeds 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
        self._consumed = False

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._seq = next(_counter)
        out._consumed = False
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() requires a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must hold a single value. Intermediate closures are released
        afterwards, so a second call on the same graph raises
        :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already called on this graph; rerun the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")

        nodes = _reachable(self)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self._consumed = True

    # arithmetic sugar; the functional module holds the real definitions
    def __add__(self, other):
        from . import functional as F

        return F.add(self, _wrap(other, self))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, _wrap(other, self))

    def __mul__(self, other):
        from . import functional as F

        if np.isscalar(other):
            return F.scale(self, float(other))
        return F.hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype), dtype=like.dtype)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


class SGD:
    """Stochastic gradient descent with classical momentum.

    ``v <- momentum * v - lr * g``, then ``p <- p + v``.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v.astype(p.data.dtype, copy=False)
        for p in self.params:
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter after update: {p.name}")


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, velocity: list | None = None) -> list:
    """Functional form of one SGD update; returns the velocity list to feed back in."""
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        v *= momentum
        v -= lr * p.grad
        p.data += v
    return velocity
