"""Binary tensor container and named-checkpoint serialization.

One record = magic "T4DP", u32 version, four u32 dims, then the values
as little-endian float64 in row-major (n, c, h, w) order. A checkpoint
file is a plain concatenation of records; the parameter names live in a
sidecar text manifest (one name per line, same order as the records).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor4

MAGIC = b"T4DP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, n, c, h, w


def tensor_to_bytes(t: Tensor4) -> bytes:
    n, c, h, w = t.shape
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w)
    return header + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one record; returns (Tensor4, next_offset)."""
    magic, version, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ValueError(f"bad container magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    start = offset + _HEADER.size
    count = n * c * h * w
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=start)
    return Tensor4(data.reshape(n, c, h, w).astype(np.float64)), start + count * 8


def save_tensor(path, t: Tensor4):
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor4:
    t, _ = tensor_from_bytes(Path(path).read_bytes())
    return t


def manifest_path(container_path) -> Path:
    return Path(str(container_path) + ".manifest")


def save_checkpoint(path, params: dict):
    """Write named tensors: records concatenated, names in the sidecar manifest."""
    path = Path(path)
    names = list(params.keys())
    with open(path, "wb") as fh:
        for name in names:
            fh.write(tensor_to_bytes(params[name]))
    manifest_path(path).write_text("".join(name + "\n" for name in names))


def load_checkpoint(path) -> dict:
    path = Path(path)
    names = manifest_path(path).read_text().splitlines()
    buf = path.read_bytes()
    out = {}
    offset = 0
    for name in names:
        out[name], offset = tensor_from_bytes(buf, offset)
    if offset != len(buf):
        raise ValueError(f"checkpoint {path} has {len(buf) - offset} trailing bytes")
    return out


def load_checkpoint_into(path, params: dict):
    """Copy stored values into existing (typically requires_grad) tensors."""
    stored = load_checkpoint(path)
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {stored[name].shape} vs {t.shape}")
        t.data[...] = stored[name].data
