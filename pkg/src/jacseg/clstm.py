"""Convolutional LSTM over axial slice sequences.

Gate equations (``*`` is convolution, ``.`` elementwise, peepholes are
per-channel weights on the cell state)::

    i  = sigmoid(W_i * [x, h] + w_ci . c  + b_i)
    f  = sigmoid(W_f * [x, h] + w_cf . c  + b_f)
    c' = f . c + i . tanh(W_g * [x, h] + b_g)
    o  = sigmoid(W_o * [x, h] + w_co . c' + b_o)
    h' = o . tanh(c')

The four gate kernels are stored stacked in one tensor in (i, f, o, g) order
so a single convolution evaluates all of them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .network import SegNet
from .tensor import Tensor, no_grad

__all__ = [
    "CLSTMCell",
    "SequenceState",
    "RNNSegNet",
    "build_cell",
    "clstm_step",
    "attach_clstm",
    "run_sequence",
]

_GATES = ("i", "f", "o", "g")


@dataclass
class CLSTMCell:
    in_channels: int
    hidden_channels: int
    gate_kernel: Tensor  # (4 * hidden, in + hidden, k, k)
    gate_bias: Tensor  # (4 * hidden,)
    peephole_i: Tensor | None
    peephole_f: Tensor | None
    peephole_o: Tensor | None

    @property
    def kernel_size(self) -> int:
        return self.gate_kernel.shape[-1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield self.gate_kernel.name, self.gate_kernel
        yield self.gate_bias.name, self.gate_bias
        for p in (self.peephole_i, self.peephole_f, self.peephole_o):
            if p is not None:
                yield p.name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def gate_slice(self, gate: str) -> slice:
        k = _GATES.index(gate)
        return slice(k * self.hidden_channels, (k + 1) * self.hidden_channels)


def build_cell(
    in_channels: int,
    hidden_channels: int,
    seed: int = 0,
    kernel_size: int = 3,
    peepholes: bool = True,
    init_scale: float = 1.0,
    forget_bias: float = 1.0,
    dtype=np.float64,
) -> CLSTMCell:
    if in_channels < 1 or hidden_channels < 1:
        raise ValueError("CLSTM channels must be >= 1")
    rng = np.random.default_rng(seed)
    ch = hidden_channels
    fan_in = (in_channels + ch) * kernel_size * kernel_size
    kernel = rng.standard_normal((4 * ch, in_channels + ch, kernel_size, kernel_size)) * init_scale / np.sqrt(fan_in)
    bias = np.zeros(4 * ch)
    bias[ch : 2 * ch] = forget_bias

    def peep(name):
        if not peepholes:
            return None
        return Tensor(rng.standard_normal(ch) * init_scale, requires_grad=True, name=f"clstm.peephole_{name}", dtype=dtype)

    pi, pf, po = peep("i"), peep("f"), peep("o")
    return CLSTMCell(
        in_channels=in_channels,
        hidden_channels=ch,
        gate_kernel=Tensor(kernel, requires_grad=True, name="clstm.gate.weight", dtype=dtype),
        gate_bias=Tensor(bias, requires_grad=True, name="clstm.gate.bias", dtype=dtype),
        peephole_i=pi,
        peephole_f=pf,
        peephole_o=po,
    )


@dataclass
class SequenceState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype=np.float64) -> "SequenceState":
        shape = (batch, channels, height, width)
        return cls(Tensor(np.zeros(shape), dtype=dtype), Tensor(np.zeros(shape), dtype=dtype))


def _peephole(pre: Tensor, weights: Tensor | None, c: Tensor) -> Tensor:
    return pre if weights is None else F.add(pre, F.scale_channels(c, weights))


def clstm_step(cell: CLSTMCell, x: Tensor, state: SequenceState) -> tuple[Tensor, SequenceState]:
    """Advance the cell by one slice; returns (output, new state) with output == new hidden."""
    if x.ndim != 4 or x.shape[1] != cell.in_channels:
        raise ValueError(f"expected batch x {cell.in_channels} x H x W input, got {x.shape}")
    expected = (x.shape[0], cell.hidden_channels) + x.shape[2:]
    if state.hidden.shape != expected or state.cell.shape != expected:
        raise ValueError(f"state shape {state.hidden.shape}/{state.cell.shape} does not match {expected}")
    ch = cell.hidden_channels
    pre = F.conv2d(F.concat([x, state.hidden], axis=1), cell.gate_kernel, cell.gate_bias, padding=cell.kernel_size // 2)
    pre_i = F.slice_axis(pre, 1, 0, ch)
    pre_f = F.slice_axis(pre, 1, ch, 2 * ch)
    pre_o = F.slice_axis(pre, 1, 2 * ch, 3 * ch)
    pre_g = F.slice_axis(pre, 1, 3 * ch, 4 * ch)
    c = state.cell
    i = F.sigmoid(_peephole(pre_i, cell.peephole_i, c))
    f = F.sigmoid(_peephole(pre_f, cell.peephole_f, c))
    g = F.tanh(pre_g)
    c_new = F.add(F.hadamard(f, c), F.hadamard(i, g))
    o = F.sigmoid(_peephole(pre_o, cell.peephole_o, c_new))
    h_new = F.hadamard(o, F.tanh(c_new))
    return h_new, SequenceState(h_new, c_new)


@dataclass
class RNNSegNet:
    """A :class:`SegNet` whose stacked side-output scores feed a CLSTM.

    The readout is a 1x1 convolution over ``[side scores, hidden]``; a sigmoid
    turns it into the per-slice probability map.
    """

    segnet: SegNet
    cell: CLSTMCell
    readout_kernel: Tensor
    readout_bias: Tensor
    provenance: set = field(default_factory=set)

    @property
    def dtype(self):
        return self.segnet.dtype

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.segnet.named_parameters()
        yield from self.cell.named_parameters()
        yield self.readout_kernel.name, self.readout_kernel
        yield self.readout_bias.name, self.readout_bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def recurrent_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(name, p.data) for name, p in self.cell.named_parameters()]
        out.append((self.readout_kernel.name, self.readout_kernel.data))
        out.append((self.readout_bias.name, self.readout_bias.data))
        return out

    def step(self, side_scores: Tensor, state: SequenceState) -> tuple[Tensor, SequenceState]:
        """One recurrent step on stacked side scores; returns (probability map, state)."""
        h, state = clstm_step(self.cell, side_scores, state)
        logits = F.conv2d(F.concat([side_scores, h], axis=1), self.readout_kernel, self.readout_bias)
        return F.sigmoid(logits), state

    def unroll(self, side_scores: Sequence[Tensor], valid: Sequence[np.ndarray] | None = None) -> Tensor:
        """Run from a zero state through ``side_scores`` and return the last probability map.

        ``valid[j]`` optionally flags, per batch row, whether step ``j`` is
        real. Invalid steps must form a prefix of each row's window; the
        state of those rows is held at zero until their first valid step.
        """
        first = side_scores[0]
        n, _, h, w = first.shape
        state = SequenceState.zeros(n, self.cell.hidden_channels, h, w, dtype=first.dtype)
        prob = None
        for j, x in enumerate(side_scores):
            prob, state = self.step(x, state)
            if valid is not None and not np.all(valid[j]):
                mask = np.broadcast_to(np.asarray(valid[j], dtype=first.dtype).reshape(-1, 1, 1, 1), state.hidden.shape)
                m = Tensor(np.ascontiguousarray(mask), dtype=first.dtype)
                state = SequenceState(F.hadamard(state.hidden, m), F.hadamard(state.cell, m))
        return prob

    def stacked_scores(self, images: Tensor, training: bool = False) -> Tensor:
        return F.concat(self.segnet.scores(images, training), axis=1)


def attach_clstm(net: SegNet, hidden_channels: int = 8, seed: int = 0, **cell_kwargs) -> RNNSegNet:
    """Wrap a copy of ``net`` with a CLSTM whose readout reproduces the fused CNN output.

    The readout weights on the side scores start as the fusion weights and
    those on the hidden state start at zero, so the first predictions equal
    the source network's fused probabilities.
    """
    source = copy.deepcopy(net)
    source.provenance = set(net.provenance)
    n_scores = len(source.scales)
    cell = build_cell(n_scores, hidden_channels, seed=seed, dtype=source.dtype, **cell_kwargs)
    kernel = np.zeros((1, n_scores + hidden_channels, 1, 1))
    kernel[:, :n_scores] = source.fusion_kernel.data
    readout = Tensor(kernel, requires_grad=True, name="readout.weight", dtype=source.dtype)
    bias = Tensor(source.fusion_bias.data.copy(), requires_grad=True, name="readout.bias", dtype=source.dtype)
    return RNNSegNet(source, cell, readout, bias, provenance=set(source.provenance))


def run_sequence(net: RNNSegNet, slices, window: int = 3, direction: str | None = None, batch_size: int = 16) -> list[np.ndarray]:
    """Per-slice probability maps for an ordered slice sequence.

    Each slice is predicted by unrolling the cell from a zero state over the
    ``window`` preceding slices and the slice itself. ``slices`` is a
    :class:`~jacseg.data.SliceSequence` or an array of shape (depth, H, W).
    ``direction`` overrides the traversal: ``"reverse"`` processes the
    sequence back to front. Outputs are returned in the input's slice order.
    """
    images = np.asarray(getattr(slices, "images", slices))
    if images.ndim != 3 or images.shape[0] == 0:
        raise ValueError("run_sequence needs a non-empty (depth, H, W) slice stack")
    if window < 0:
        raise ValueError("window must be >= 0")
    reverse = direction == "reverse"
    if direction not in (None, "forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    if reverse:
        images = images[::-1]
    depth = images.shape[0]
    with no_grad():
        scores = []
        for lo in range(0, depth, batch_size):
            batch = Tensor(images[lo : lo + batch_size, None], dtype=net.dtype)
            scores.append(net.stacked_scores(batch, training=False).data)
        scores = np.concatenate(scores, axis=0)
        out = np.empty((depth,) + images.shape[1:], dtype=net.dtype)
        for lo in range(0, depth, batch_size):
            t = np.arange(lo, min(lo + batch_size, depth))
            steps, valid = [], []
            for j in range(window + 1):
                src = t - window + j
                steps.append(Tensor(scores[np.clip(src, 0, None)], dtype=net.dtype))
                valid.append(src >= 0)
            out[t] = net.unroll(steps, valid).data[:, 0]
    maps = list(out)
    if reverse:
        maps = maps[::-1]
    return maps
