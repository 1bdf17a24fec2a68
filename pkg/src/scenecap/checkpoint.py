"""Binary checkpoint files for named parameter tensors.

Layout (all integers little-endian):

    magic  "CKV2"
    u16    format version (currently 1)
    u32    record count
    per record:
        u16      name byte length, then that many UTF-8 bytes
        u8       rank
        u32 * rank   dims
        f32 * prod(dims)   data, little-endian

Tensors live in memory as float64; files store float32 for compactness, so
save -> load round-trips values to ~1e-7 relative. load -> save is
byte-identical because float32 -> float64 -> float32 is exact.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import FormatError

MAGIC = b"CKV2"
VERSION = 1


def save_checkpoint(path, params: Mapping[str, "Tensor | np.ndarray"]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into float64 arrays, preserving record order."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def need(n: int, offset: int, what: str) -> int:
        if offset + n > len(blob):
            raise FormatError(f"checkpoint truncated at byte {offset}: expected {what}")
        return offset + n

    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    off = need(6, 4, "header")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")

    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = off
        off = need(2, off, "name length")
        (name_len,) = struct.unpack_from("<H", blob, start)
        off = need(name_len, off, "name")
        name = blob[off - name_len:off].decode("utf-8")
        off = need(1, off, "rank")
        rank = blob[off - 1]
        off = need(4 * rank, off, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, off - 4 * rank)
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        off = need(4 * n, off, f"data of record '{name}'")
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off - 4 * n)
        out[name] = data.astype(np.float64).reshape(dims)
    return out


def restore_into(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into existing parameter tensors, shape-checked."""
    missing = [k for k in params if k not in arrays]
    if missing:
        raise FormatError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(
                f"checkpoint record '{name}' has shape {arr.shape}, expected {p.data.shape}")
        p.data[...] = arr
