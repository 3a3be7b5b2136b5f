"""``NTTCKPT1`` binary checkpoints: architecture name, seed, mask bitset and parameters.

Layout (all integers little-endian)::

    magic    8 bytes  b"NTTCKPT1"
    version  u32      1
    reserved u32      0
    name_len u16, name utf-8
    seed     u64
    P        u64
    mask     ceil(P / 8) bytes, bit i of the vector at byte i // 8, bit i % 8 (LSB first)
    params   P x f64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["MAGIC", "VERSION", "Checkpoint", "encode_checkpoint", "decode_checkpoint",
           "write_checkpoint", "read_checkpoint"]

MAGIC = b"NTTCKPT1"
VERSION = 1
_HEADER = struct.Struct("<8sII")


@dataclass(frozen=True)
class Checkpoint:
    arch: str
    seed: int
    mask: np.ndarray
    params: np.ndarray


def encode_checkpoint(arch: str, seed: int, mask: np.ndarray, params: np.ndarray) -> bytes:
    mask = np.asarray(mask)
    params = np.asarray(params, dtype=np.float64)
    if mask.shape != params.shape or params.ndim != 1:
        raise ValueError("mask and params must be vectors of equal length")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    name = arch.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ValueError("architecture name too long")
    parts = [
        _HEADER.pack(MAGIC, VERSION, 0),
        struct.pack("<H", len(name)),
        name,
        struct.pack("<QQ", int(seed) & 0xFFFFFFFFFFFFFFFF, params.size),
        np.packbits(mask.astype(bool), bitorder="little").tobytes(),
        params.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size + 2:
        raise DataError("checkpoint truncated in header")
    magic, version, _ = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"not an NTTCKPT1 checkpoint (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = _HEADER.size
    (name_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if len(blob) < pos + name_len + 16:
        raise DataError("checkpoint truncated in metadata")
    arch = blob[pos:pos + name_len].decode("utf-8")
    pos += name_len
    seed, n = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    n_mask = (n + 7) // 8
    if len(blob) != pos + n_mask + 8 * n:
        raise DataError(f"checkpoint payload has {len(blob) - pos} bytes, expected {n_mask + 8 * n}")
    bits = np.frombuffer(blob, dtype=np.uint8, count=n_mask, offset=pos)
    mask = np.unpackbits(bits, count=n, bitorder="little").astype(np.float64)
    pos += n_mask
    params = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return Checkpoint(arch, int(seed), mask, params)


def write_checkpoint(path, arch: str, seed: int, mask: np.ndarray, params: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arch, seed, mask, params))
    return path


def read_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(blob)
