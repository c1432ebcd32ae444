"""Binary checkpoint format.

Layout (little endian)::

    b"L2C1"  u16 version
    u16 n_fields, then per field: u16 name_len, name, i64 value
    u32 n_tensors, then per tensor: u16 name_len, name, u8 rank, u32 dims..., f32 data
"""
from __future__ import annotations

import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .model import DenoiserModel, ModelConfig

MAGIC = b"L2C1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _name(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw


def dumps(model: DenoiserModel) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    cfg = asdict(model.config)
    buf += struct.pack("<H", len(cfg))
    for k, v in cfg.items():
        _name(buf, k)
        buf += struct.pack("<q", int(v))
    buf += struct.pack("<I", len(model.params))
    for k in sorted(model.params):
        arr = np.ascontiguousarray(model.params[k], dtype="<f4")
        _name(buf, k)
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def name(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        s = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s


def loads(data: bytes) -> DenoiserModel:
    if data[:4] != MAGIC:
        raise CheckpointError("not an L2C1 checkpoint (bad magic)")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.take("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (nf,) = r.take("<H")
    known = {f.name: f.type for f in fields(ModelConfig)}
    cfg = {}
    for _ in range(nf):
        k = r.name()
        (v,) = r.take("<q")
        if k not in known:
            raise CheckpointError(f"unknown config field {k!r}")
        cfg[k] = bool(v) if k == "long_skip" else v
    (nt,) = r.take("<I")
    params = {}
    for _ in range(nt):
        k = r.name()
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        if r.pos + 4 * count > len(data):
            raise CheckpointError("checkpoint truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=r.pos).reshape(dims)
        r.pos += 4 * count
        params[k] = arr.astype(np.float32)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    try:
        return DenoiserModel(ModelConfig(**cfg), params)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None


def save(model: DenoiserModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> DenoiserModel:
    return loads(Path(path).read_bytes())
