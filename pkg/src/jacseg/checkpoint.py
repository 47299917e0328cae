"""Binary model checkpoints.

Layout (little-endian)::

    b"SEGN"                      magic
    u16                          format version (1)
    u32 n, n bytes               UTF-8 JSON header (sorted keys): kind, dtype,
                                 network config, optional clstm config, meta
    u16                          section count
    per section:
        4 bytes                  tag: b"CNN0" (SegNet) or b"CLSM" (CLSTM + readout)
        u32                      tensor count
        per tensor:
            u16 n, n bytes       UTF-8 name
            u8                   ndim
            u32 * ndim           shape
            f64 * prod(shape)    values, C order

The CNN0 section lists the trainable parameters in declaration order followed
by the batch-norm running statistics.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .clstm import RNNSegNet, attach_clstm
from .network import SegNet, SegNetConfig, build_network

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "checkpoint_bytes", "FORMAT_VERSION"]

MAGIC = b"SEGN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_tensors(buf: io.BytesIO, tag: bytes, arrays) -> None:
    arrays = list(arrays)
    buf.write(tag)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(net, meta: dict | None = None) -> bytes:
    if isinstance(net, RNNSegNet):
        segnet = net.segnet
        header = {
            "kind": "rnn",
            "clstm": {
                "hidden_channels": net.cell.hidden_channels,
                "kernel_size": net.cell.kernel_size,
                "peepholes": net.cell.peephole_i is not None,
            },
        }
    elif isinstance(net, SegNet):
        segnet = net
        header = {"kind": "segnet"}
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    header["dtype"] = np.dtype(segnet.dtype).name
    header["network"] = segnet.config.to_dict()
    header["meta"] = meta or {}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    sections = [(b"CNN0", segnet.state_arrays())]
    if isinstance(net, RNNSegNet):
        sections.append((b"CLSM", net.recurrent_arrays()))
    buf.write(struct.pack("<H", len(sections)))
    for tag, arrays in sections:
        _write_tensors(buf, tag, arrays)
    return buf.getvalue()


def save_checkpoint(net, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, meta))
    return path


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensors(r: _Reader) -> tuple[bytes, dict[str, np.ndarray]]:
    tag = r.take(4)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).copy()
    return tag, out


def load_checkpoint(path):
    """Return (network, meta); the network is a SegNet or an RNNSegNet."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a SEGN checkpoint")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    (n,) = r.unpack("<I")
    header = json.loads(r.take(n).decode("utf-8"))
    (n_sections,) = r.unpack("<H")
    sections = dict(_read_tensors(r) for _ in range(n_sections))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    if b"CNN0" not in sections:
        raise CheckpointError(f"{path}: missing CNN0 section")

    config = SegNetConfig.from_dict(header["network"])
    segnet = build_network(config, seed=0, dtype=header["dtype"])
    segnet.load_state_arrays(sections[b"CNN0"])
    meta = header.get("meta", {})
    if header["kind"] == "segnet":
        return segnet, meta
    if header["kind"] != "rnn" or b"CLSM" not in sections:
        raise CheckpointError(f"{path}: malformed recurrent checkpoint")
    spec = header["clstm"]
    net = attach_clstm(segnet, spec["hidden_channels"], kernel_size=spec["kernel_size"], peepholes=spec["peepholes"])
    arrays = sections[b"CLSM"]
    for name, p in list(net.cell.named_parameters()) + [
        (net.readout_kernel.name, net.readout_kernel),
        (net.readout_bias.name, net.readout_bias),
    ]:
        if name not in arrays or arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: missing or mis-shaped tensor {name!r}")
        p.data = arrays[name].astype(segnet.dtype)
    return net, meta
