"""Volumes, axial slicing, the VSEG file format, synthetic data and CV folds.

VSEG layout (little-endian)::

    offset  size  field
    0       4     magic b"VSEG"
    4       2     u16 format version (1)
    6       1     u8 dtype code: 0 = float32 intensities, 1 = uint8 labels
    7       4     u32 depth
    11      4     u32 height
    15      4     u32 width
    19      ...   depth * height * width voxels, depth-major (C order)

A case is stored as ``<case>.img.vseg`` plus ``<case>.lbl.vseg``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume",
    "SliceSequence",
    "VSEGFormatError",
    "FoldPlan",
    "SynthParams",
    "read_vseg",
    "write_vseg",
    "load_volume",
    "save_volume",
    "load_dataset",
    "slice_axial",
    "synth_generate",
    "synth_dataset",
    "make_folds",
    "split_train_val",
    "normalize_intensity",
]

MAGIC = b"VSEG"
VERSION = 1
_HEADER = struct.Struct("<4sHBIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MAX_VOXELS = 2**31

SUPERIOR_TO_INFERIOR = "superior_to_inferior"
INFERIOR_TO_SUPERIOR = "inferior_to_superior"


class VSEGFormatError(ValueError):
    pass


@dataclass
class Volume:
    """A 3-D scan (depth x H x W) with its binary annotation.

    ``corrupted`` flags synthetic slices whose appearance was degraded; it is
    in-memory bookkeeping only and is not written to VSEG files.
    """

    intensities: np.ndarray
    labels: np.ndarray
    case_id: str
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    corrupted: np.ndarray | None = None

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"intensities must be 3-D, got shape {self.intensities.shape}")
        if self.labels.shape != self.intensities.shape:
            raise ValueError(f"label shape {self.labels.shape} != intensity shape {self.intensities.shape}")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")
        self.labels = self.labels.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    @property
    def depth(self) -> int:
        return self.intensities.shape[0]

    @property
    def foreground_fraction(self) -> float:
        return float(self.labels.mean())


def write_vseg(path, array: np.ndarray, dtype_code: int) -> None:
    if dtype_code not in _DTYPES:
        raise VSEGFormatError(f"unknown dtype code {dtype_code}")
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"VSEG payload must be 3-D, got shape {arr.shape}")
    if dtype_code == 1 and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("label payload must be binary")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_code])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dtype_code, *arr.shape))
        fh.write(payload.tobytes())


def read_vseg(path) -> tuple[np.ndarray, int]:
    """Return (array, dtype code) from a VSEG file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VSEGFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, d, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VSEGFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VSEGFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise VSEGFormatError(f"{path}: unknown dtype code {code}")
    voxels = d * h * w
    if voxels > MAX_VOXELS:
        raise VSEGFormatError(f"{path}: dims {d}x{h}x{w} exceed the {MAX_VOXELS}-voxel limit")
    dtype = _DTYPES[code]
    expected = voxels * dtype.itemsize
    got = len(raw) - _HEADER.size
    if got < expected:
        raise VSEGFormatError(f"{path}: truncated payload ({got} of {expected} bytes)")
    if got > expected:
        raise VSEGFormatError(f"{path}: {got - expected} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, count=voxels, offset=_HEADER.size).reshape(d, h, w).copy()
    return arr, code


def _case_paths(path) -> tuple[Path, Path, str]:
    path = Path(path)
    name = path.name
    for suffix in (".img.vseg", ".lbl.vseg"):
        if name.endswith(suffix):
            case = name[: -len(suffix)]
            break
    else:
        case = name
    base = path.parent
    return base / f"{case}.img.vseg", base / f"{case}.lbl.vseg", case


def save_volume(volume: Volume, directory) -> tuple[Path, Path]:
    """Write ``<case>.img.vseg`` and ``<case>.lbl.vseg`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img, lbl, _ = _case_paths(directory / volume.case_id)
    write_vseg(img, volume.intensities, 0)
    write_vseg(lbl, volume.labels, 1)
    return img, lbl


def load_volume(path, require_labels: bool = True) -> Volume:
    """Load a case from its ``.img.vseg`` path or from the ``<dir>/<case>`` prefix.

    Without a label file and ``require_labels=False`` the labels are all zero.
    """
    img_path, lbl_path, case = _case_paths(path)
    img, code = read_vseg(img_path)
    if code != 0:
        raise VSEGFormatError(f"{img_path}: expected float32 intensities, got dtype code {code}")
    if lbl_path.exists():
        lbl, code = read_vseg(lbl_path)
        if code != 1:
            raise VSEGFormatError(f"{lbl_path}: expected uint8 labels, got dtype code {code}")
        if lbl.shape != img.shape:
            raise VSEGFormatError(f"{lbl_path}: label dims {lbl.shape} differ from image dims {img.shape}")
    elif require_labels:
        raise FileNotFoundError(lbl_path)
    else:
        lbl = np.zeros(img.shape, dtype=np.uint8)
    return Volume(img, lbl, case)


def load_dataset(directory) -> list[Volume]:
    """Every case in ``directory``, sorted by case id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(directory)
    cases = sorted(p.name[: -len(".img.vseg")] for p in directory.glob("*.img.vseg"))
    return [load_volume(directory / c) for c in cases]


@dataclass
class SliceSequence:
    """Ordered axial slices of one volume."""

    images: np.ndarray  # (depth, H, W)
    labels: np.ndarray  # (depth, H, W)
    case_id: str
    direction: str = SUPERIOR_TO_INFERIOR

    def __len__(self) -> int:
        return self.images.shape[0]

    def __iter__(self):
        return iter(zip(self.images, self.labels))

    def reversed(self) -> "SliceSequence":
        flipped = INFERIOR_TO_SUPERIOR if self.direction == SUPERIOR_TO_INFERIOR else SUPERIOR_TO_INFERIOR
        return SliceSequence(self.images[::-1].copy(), self.labels[::-1].copy(), self.case_id, flipped)

    def restack(self) -> tuple[np.ndarray, np.ndarray]:
        """(intensities, labels) in volume (superior-to-inferior) order."""
        if self.direction == SUPERIOR_TO_INFERIOR:
            return self.images.copy(), self.labels.copy()
        return self.images[::-1].copy(), self.labels[::-1].copy()


def slice_axial(volume: Volume, direction: str = SUPERIOR_TO_INFERIOR) -> SliceSequence:
    """Axial slices; volume index 0 is taken as the most superior slice."""
    if direction not in (SUPERIOR_TO_INFERIOR, INFERIOR_TO_SUPERIOR):
        raise ValueError(f"unknown direction {direction!r}")
    seq = SliceSequence(volume.intensities.copy(), volume.labels.copy(), volume.case_id)
    return seq if direction == SUPERIOR_TO_INFERIOR else seq.reversed()


def normalize_intensity(volume: Volume) -> Volume:
    """Shift and scale to zero mean, unit variance (float64); constant volumes map to zeros."""
    x = volume.intensities.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    out = np.zeros_like(x) if sd == 0 else (x - mu) / sd
    return replace(volume, intensities=out)


@dataclass(frozen=True)
class SynthParams:
    """Parameters of the synthetic tube-like blob generator.

    ``radius_range`` bounds the relative cross-section radius along the
    depth axis; the absolute scale is calibrated so the achieved foreground
    fraction lands near ``foreground_fraction``. ``drift`` is the per-slice
    displacement of each blob centre in pixels.
    """

    dims: tuple[int, int, int] = (32, 64, 64)
    blob_count: int = 1
    radius_range: tuple[float, float] = (0.7, 1.3)
    drift: float = 0.5
    foreground_fraction: float = 0.015
    noise: float = 0.25
    texture: float = 0.3
    contrast: float = 1.0
    corruption: float = 0.0
    corruption_contrast: float = 0.0
    edge_softness: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius_range must be positive and ordered")
        if not 0 < self.foreground_fraction <= 0.2:
            raise ValueError("foreground_fraction must lie in (0, 0.2]")
        if self.drift < 0 or self.noise < 0 or self.texture < 0 or self.edge_softness <= 0:
            raise ValueError("drift, noise and texture must be non-negative; edge_softness positive")
        if not 0 <= self.corruption <= 1 or not 0 <= self.corruption_contrast <= 1:
            raise ValueError("corruption and corruption_contrast must lie in [0, 1]")


def _blob_fields(params: SynthParams, rng: np.random.Generator):
    # random shape draws, independent of the absolute radius scale
    d, h, w = params.dims
    lo, hi = params.radius_range
    z = np.arange(d)
    blobs = []
    for _ in range(params.blob_count):
        period = rng.uniform(1.0, 2.0) * max(d, 2)
        phase = rng.uniform(0, 2 * np.pi)
        rel = lo + (hi - lo) * (0.5 + 0.5 * np.sin(2 * np.pi * z / period + phase))
        angle = rng.uniform(0, 2 * np.pi)
        vy, vx = params.drift * np.sin(angle), params.drift * np.cos(angle)
        wobble = rng.uniform(0, 2 * np.pi, size=2)
        cy = vy * (z - (d - 1) / 2) + 0.5 * params.drift * np.sin(2 * np.pi * z / period + wobble[0])
        cx = vx * (z - (d - 1) / 2) + 0.5 * params.drift * np.sin(2 * np.pi * z / period + wobble[1])
        harmonics = rng.uniform(0.0, 0.15, size=2)
        hphase = rng.uniform(0, 2 * np.pi, size=2)
        hdrift = rng.uniform(-0.1, 0.1, size=2)
        anchor = rng.uniform(0.3, 0.7, size=2)
        blobs.append((rel, cy, cx, harmonics, hphase, hdrift, anchor))
    return blobs


def _render(params: SynthParams, blobs, scale: float):
    d, h, w = params.dims
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    signed = np.full((d, h, w), -np.inf)
    for rel, cy, cx, harmonics, hphase, hdrift, anchor in blobs:
        rmax = scale * rel.max() * (1 + harmonics.sum())
        margin = rmax + 1.0
        span_y = np.ptp(cy) if d > 1 else 0.0
        span_x = np.ptp(cx) if d > 1 else 0.0
        if 2 * margin + span_y > h or 2 * margin + span_x > w:
            raise ValueError(
                f"infeasible synthesis: blob radius {rmax:.1f} with drift does not fit in {h}x{w}"
            )
        # place the whole path inside the frame
        oy = margin - cy.min() + anchor[0] * (h - 2 * margin - span_y)
        ox = margin - cx.min() + anchor[1] * (w - 2 * margin - span_x)
        for k in range(d):
            dy = yy - (cy[k] + oy)
            dx = xx - (cx[k] + ox)
            theta = np.arctan2(dy, dx)
            dist = np.hypot(dy, dx)
            mod = 1.0
            for m, (amp, ph, dr) in enumerate(zip(harmonics, hphase, hdrift), start=2):
                mod = mod + amp * np.cos(m * theta + ph + dr * k)
            radius = scale * rel[k] * mod
            signed[k] = np.maximum(signed[k], radius - dist)
    return signed


def synth_generate(params: SynthParams, case_id: str | None = None) -> Volume:
    """Generate one synthetic volume with small drifting blobs.

    Intensity = contrast * soft blob mask + smooth background texture +
    white noise. Slices drawn for corruption keep texture and noise but have
    the blob signal scaled by ``corruption_contrast``.
    """
    rng = np.random.default_rng(params.seed)
    d, h, w = params.dims
    blobs = _blob_fields(params, rng)
    target = params.foreground_fraction
    # mean cross-section area for the target fraction, then refine on the rendered mask
    mean_rel = np.mean([np.mean(b[0] ** 2) for b in blobs])
    scale = np.sqrt(target * h * w / (params.blob_count * np.pi * mean_rel))
    for _ in range(4):
        signed = _render(params, blobs, scale)
        achieved = float((signed >= 0).mean())
        if achieved == 0:
            scale *= 1.5
            continue
        if abs(achieved / target - 1) < 0.05:
            break
        scale *= np.sqrt(target / achieved)
    signed = _render(params, blobs, scale)
    labels = (signed >= 0).astype(np.uint8)
    soft = 1.0 / (1.0 + np.exp(-np.clip(signed / params.edge_softness, -50, 50)))

    texture = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(1.0, 3.0, 3.0))
    tstd = texture.std()
    texture = texture / tstd * params.texture if tstd > 0 else texture * 0
    noise = rng.standard_normal((d, h, w)) * params.noise
    corrupted = rng.random(d) < params.corruption
    gain = np.where(corrupted, params.corruption_contrast, 1.0)[:, None, None]
    intensities = (params.contrast * soft * gain + texture + noise).astype(np.float32)
    cid = case_id if case_id is not None else f"synth{params.seed:04d}"
    return Volume(intensities, labels, cid, corrupted=corrupted)


def synth_dataset(n_cases: int, params: SynthParams, base_seed: int | None = None, prefix: str = "case") -> list[Volume]:
    """``n_cases`` volumes with seeds ``base_seed * 100003 + i`` and ids ``<prefix>000``, ..."""
    base = params.seed if base_seed is None else base_seed
    return [
        synth_generate(replace(params, seed=base * 100003 + i), case_id=f"{prefix}{i:03d}") for i in range(n_cases)
    ]


@dataclass
class FoldPlan:
    assignments: dict[str, int]
    k: int
    seed: int

    def fold_cases(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignments.items() if f == fold)

    def train_cases(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignments.items() if f != fold)

    def sizes(self) -> list[int]:
        return [len(self.fold_cases(i)) for i in range(self.k)]

    def to_csv(self, path=None) -> str:
        lines = ["case_id,fold"] + [f"{c},{self.assignments[c]}" for c in sorted(self.assignments)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path, seed: int = -1) -> "FoldPlan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assignments = {r["case_id"]: int(r["fold"]) for r in rows}
        k = max(assignments.values()) + 1 if assignments else 0
        return cls(assignments, k, seed)


def _ids(cases: Iterable) -> list[str]:
    return sorted(c if isinstance(c, str) else c.case_id for c in cases)


def make_folds(case_ids: Sequence, k: int = 4, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment."""
    ids = _ids(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} cases")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan({ids[j]: pos % k for pos, j in enumerate(order)}, k, seed)


def split_train_val(cases: Sequence, fraction: float, seed: int = 0) -> tuple[list, list]:
    """Case-level split; ``fraction`` of the cases (rounded, at least one) go to validation.

    Accepts case ids or :class:`Volume` objects and returns the same kind.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    items = sorted(cases, key=lambda c: c if isinstance(c, str) else c.case_id)
    n = len(items)
    n_val = max(1, int(round(fraction * n)))
    if n < 2 or n_val >= n:
        raise ValueError(f"cannot split {n} cases into non-empty train and validation subsets")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [items[i] for i in range(n) if i not in val_idx]
    val = [items[i] for i in range(n) if i in val_idx]
    return train, val
