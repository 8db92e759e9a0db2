"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    b"EVLG"                      magic
    u32   version                (1)
    32 B  sha256 of the config JSON
    u32   config length, then the config as canonical UTF-8 JSON
    u32   blob count
    per blob, in declaration order:
        u16 name length, name (UTF-8)
        u8  ndim, u32 * ndim extents
        float64 little-endian values, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EVLG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(canonical_json(config)).digest()


def encode(config: dict, blobs: dict[str, np.ndarray]) -> bytes:
    cfg = canonical_json(config)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg).digest(), struct.pack("<I", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    digest = bytes(take(32))
    (n_cfg,) = struct.unpack("<I", take(4))
    cfg_raw = bytes(take(n_cfg))
    if hashlib.sha256(cfg_raw).digest() != digest:
        raise CheckpointError(f"{source}: config digest mismatch")
    config = json.loads(cfg_raw)
    (count,) = struct.unpack("<I", take(4))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return config, blobs


def save(path, config: dict, blobs: dict[str, np.ndarray]):
    Path(path).write_bytes(encode(config, blobs))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), str(path))
