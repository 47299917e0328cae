"""Compact deeply-supervised segmentation CNN built from CBR and Scale blocks.

A CBR block is conv(3x3) -> batch norm -> ReLU. A Scale block stacks several
CBR blocks and ends in a 1x1 score head whose output is upsampled back to the
input resolution (a side output). Scale blocks are separated by 2x2 max
pooling. The side-output scores are concatenated and fused by a learned 1x1
convolution; every side output and the fused map pass through a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F
from .functional import BatchNormState
from .tensor import Tensor

__all__ = [
    "CBRBlockConfig",
    "ScaleBlockConfig",
    "SegNetConfig",
    "SegNet",
    "build_network",
    "count_parameters",
    "jac64_config",
    "jac128_config",
    "parameter_tally",
]


@dataclass(frozen=True)
class CBRBlockConfig:
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("CBR block channels must be >= 1")


@dataclass(frozen=True)
class ScaleBlockConfig:
    cbr_count: int
    channels: int
    has_aux_head: bool = True

    def __post_init__(self):
        if self.cbr_count < 1:
            raise ValueError("a scale block needs at least one CBR block")
        if self.channels < 1:
            raise ValueError("scale block channels must be >= 1")


@dataclass(frozen=True)
class SegNetConfig:
    """Topology of a :class:`SegNet`.

    ``base_channels`` names the variant (64 for JAC-64, 128 for JAC-128); the
    per-block ``channels`` fields are what the builder actually uses.
    """

    scale_blocks: tuple[ScaleBlockConfig, ...]
    base_channels: int
    input_channels: int = 1
    kernel_size: int = 3
    fusion: str = "conv1x1"

    def __post_init__(self):
        object.__setattr__(self, "scale_blocks", tuple(self.scale_blocks))
        if not self.scale_blocks:
            raise ValueError("SegNetConfig needs at least one scale block")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.fusion != "conv1x1":
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @classmethod
    def uniform(cls, scales: int, cbr_per_block: int, channels: int, input_channels: int = 1, has_aux_head: bool = True):
        blocks = tuple(ScaleBlockConfig(cbr_per_block, channels, has_aux_head) for _ in range(scales))
        return cls(blocks, base_channels=channels, input_channels=input_channels)

    @property
    def divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** (len(self.scale_blocks) - 1)

    def cbr_blocks(self) -> list[list[CBRBlockConfig]]:
        out = []
        cin = self.input_channels
        for block in self.scale_blocks:
            layers = []
            for _ in range(block.cbr_count):
                layers.append(CBRBlockConfig(cin, block.channels))
                cin = block.channels
            out.append(layers)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegNetConfig":
        d = dict(d)
        d["scale_blocks"] = tuple(ScaleBlockConfig(**b) for b in d["scale_blocks"])
        return cls(**d)


def jac64_config() -> SegNetConfig:
    """Five Scale blocks of four CBR blocks, 64 channels per convolution."""
    return SegNetConfig.uniform(5, 4, 64)


def jac128_config() -> SegNetConfig:
    return SegNetConfig.uniform(5, 4, 128)


@dataclass
class _CBR:
    kernel: Tensor
    bias: Tensor
    bn: BatchNormState


@dataclass
class _Scale:
    cbrs: list[_CBR]
    head_kernel: Tensor
    head_bias: Tensor
    has_aux_head: bool


@dataclass
class SegNet:
    config: SegNetConfig
    scales: list[_Scale]
    fusion_kernel: Tensor
    fusion_bias: Tensor
    dtype: np.dtype = field(default=np.dtype(np.float64))
    # case ids whose slices contributed to any gradient step
    provenance: set = field(default_factory=set)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for s in self.scales:
            for c in s.cbrs:
                yield c.kernel.name, c.kernel
                yield c.bias.name, c.bias
                yield c.bn.gamma.name, c.bn.gamma
                yield c.bn.beta.name, c.bn.beta
            yield s.head_kernel.name, s.head_kernel
            yield s.head_bias.name, s.head_bias
        yield self.fusion_kernel.name, self.fusion_kernel
        yield self.fusion_bias.name, self.fusion_bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def batchnorms(self) -> list[BatchNormState]:
        return [c.bn for s in self.scales for c in s.cbrs]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array needed to restore the network, in declaration order."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        for bn in self.batchnorms():
            out.append((f"{bn.name}.running_mean", bn.running_mean))
            out.append((f"{bn.name}.running_var", bn.running_var))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = _checked(arrays, name, p.data.shape).astype(self.dtype)
        for bn in self.batchnorms():
            bn.running_mean = _checked(arrays, f"{bn.name}.running_mean", bn.running_mean.shape).astype(self.dtype)
            bn.running_var = _checked(arrays, f"{bn.name}.running_var", bn.running_var.shape).astype(self.dtype)

    def scores(self, image: Tensor, training: bool = False) -> list[Tensor]:
        """Pre-sigmoid side-output score maps, one per Scale block, at input resolution."""
        if image.ndim != 4 or image.shape[1] != self.config.input_channels:
            raise ValueError(f"expected batch x {self.config.input_channels} x H x W input, got {image.shape}")
        _, _, h, w = image.shape
        d = self.config.divisor
        if h % d or w % d:
            raise ValueError(f"input extent {h}x{w} not divisible by {d}")
        pad = self.config.kernel_size // 2
        x = image
        out = []
        for i, s in enumerate(self.scales):
            if i > 0:
                x = F.maxpool2d(x, 2, 2)
            for c in s.cbrs:
                x = F.conv2d(x, c.kernel, c.bias, stride=1, padding=pad)
                x = F.batchnorm(x, c.bn, training)
                x = F.relu(x)
            score = F.conv2d(x, s.head_kernel, s.head_bias)
            out.append(F.upsample_bilinear(score, 2**i))
        return out

    def fuse(self, side_scores: list[Tensor]) -> Tensor:
        return F.conv2d(F.concat(side_scores, axis=1), self.fusion_kernel, self.fusion_bias)

    def forward(self, image: Tensor, training: bool = False) -> tuple[list[Tensor], Tensor]:
        """Return (side-output probability maps of supervised blocks, fused probability map)."""
        side_scores = self.scores(image, training)
        fused = F.sigmoid(self.fuse(side_scores))
        sides = [F.sigmoid(sc) for sc, s in zip(side_scores, self.scales) if s.has_aux_head]
        return sides, fused

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Fused probabilities for a stack of slices (N x H x W or N x 1 x H x W), inference mode."""
        from .tensor import no_grad

        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[:, None]
        out = np.empty((arr.shape[0],) + arr.shape[2:], dtype=self.dtype)
        with no_grad():
            for lo in range(0, arr.shape[0], batch_size):
                batch = Tensor(arr[lo : lo + batch_size], dtype=self.dtype)
                _, fused = self.forward(batch, training=False)
                out[lo : lo + batch_size] = fused.data[:, 0]
        return out


def _checked(arrays: dict, name: str, shape) -> np.ndarray:
    if name not in arrays:
        raise KeyError(f"missing array {name!r}")
    arr = np.asarray(arrays[name])
    if arr.shape != tuple(shape):
        raise ValueError(f"array {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def _he_kernel(rng: np.random.Generator, cout: int, cin: int, k: int, dtype, name: str) -> Tensor:
    fan_in = cin * k * k
    data = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def build_network(config: SegNetConfig, seed: int = 0, dtype=np.float64) -> SegNet:
    """Instantiate a :class:`SegNet` deterministically from ``seed``."""
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    scales = []
    for bi, (block, layers) in enumerate(zip(config.scale_blocks, config.cbr_blocks())):
        cbrs = []
        for li, layer in enumerate(layers):
            prefix = f"scale{bi}.cbr{li}"
            cbrs.append(
                _CBR(
                    kernel=_he_kernel(rng, layer.out_channels, layer.in_channels, k, dtype, f"{prefix}.conv.weight"),
                    bias=Tensor(np.zeros(layer.out_channels), requires_grad=True, name=f"{prefix}.conv.bias", dtype=dtype),
                    bn=BatchNormState.create(layer.out_channels, name=f"{prefix}.bn", dtype=dtype),
                )
            )
        head = _he_kernel(rng, 1, block.channels, 1, dtype, f"scale{bi}.head.weight")
        # unit-variance-ish scores at init; He scaling over a ReLU input is a bit hot for a linear head
        head.data *= np.sqrt(0.5)
        scales.append(
            _Scale(
                cbrs=cbrs,
                head_kernel=head,
                head_bias=Tensor(np.zeros(1), requires_grad=True, name=f"scale{bi}.head.bias", dtype=dtype),
                has_aux_head=block.has_aux_head,
            )
        )
    n = len(scales)
    fusion = Tensor(np.full((1, n, 1, 1), 1.0 / n), requires_grad=True, name="fusion.weight", dtype=dtype)
    fusion_bias = Tensor(np.zeros(1), requires_grad=True, name="fusion.bias", dtype=dtype)
    return SegNet(config, scales, fusion, fusion_bias, dtype=dtype)


def count_parameters(net) -> int:
    """Exact number of trainable scalars."""
    return int(sum(p.data.size for p in net.parameters()))


def parameter_tally(config: SegNetConfig) -> list[tuple[str, int]]:
    """Layer-by-layer trainable-parameter tally computed from the config alone."""
    k = config.kernel_size
    rows = []
    for bi, layers in enumerate(config.cbr_blocks()):
        for li, layer in enumerate(layers):
            rows.append((f"scale{bi}.cbr{li}.conv", layer.out_channels * layer.in_channels * k * k + layer.out_channels))
            rows.append((f"scale{bi}.cbr{li}.bn", 2 * layer.out_channels))
        rows.append((f"scale{bi}.head", config.scale_blocks[bi].channels + 1))
    rows.append(("fusion", len(config.scale_blocks) + 1))
    return rows
