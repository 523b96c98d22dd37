"""FMAP binary containers: multi-level feature dumps and parameter checkpoints.

Feature dump (one file per input patch, little-endian):
    magic "FMAP" (4 bytes), version u32 = 1, n_levels u32 = 4, then per level:
    source_block u32, c u32, h u32, w u32, c*h*w IEEE-754 float32 row-major.

Checkpoint container (FMAP-style, named records):
    magic "FCKP" (4 bytes), version u32 = 1, n_records u32, then per record:
    name length u32, UTF-8 name, n u32, c u32, h u32, w u32, n*c*h*w float32.
"""

from __future__ import annotations

import os
import struct

import numpy as np

FEATURE_MAGIC = b"FMAP"
CHECKPOINT_MAGIC = b"FCKP"
VERSION = 1


class FmapFormatError(ValueError):
    """Malformed FMAP/FCKP bytes; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FmapFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# feature dumps

def write_levels(path: str, levels: list[tuple[int, np.ndarray]]) -> None:
    """Write (source_block, (c, h, w) float32 array) records as a feature dump."""
    parts = [FEATURE_MAGIC, struct.pack("<II", VERSION, len(levels))]
    for source_block, arr in levels:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 3:
            raise ValueError(f"feature level must be rank-3 (c, h, w), got {arr.shape}")
        c, h, w = arr.shape
        parts.append(struct.pack("<IIII", source_block, c, h, w))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def read_levels(path: str) -> list[tuple[int, np.ndarray]]:
    """Read a feature dump back as [(source_block, (c, h, w) float32 array)]."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FmapFormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    version = rd.u32("version")
    if version != VERSION:
        raise FmapFormatError(f"unsupported version {version}", 4)
    n_levels = rd.u32("level count")
    levels = []
    for i in range(n_levels):
        source_block = rd.u32(f"level {i} source_block")
        c = rd.u32(f"level {i} c")
        h = rd.u32(f"level {i} h")
        w = rd.u32(f"level {i} w")
        raw = rd.take(4 * c * h * w, f"level {i} payload")
        arr = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy()
        levels.append((source_block, arr))
    if rd.pos != len(rd.buf):
        raise FmapFormatError(f"{len(rd.buf) - rd.pos} trailing bytes", rd.pos)
    return levels


# ---------------------------------------------------------------------------
# checkpoints

def save_params(path: str, params: dict[str, np.ndarray]) -> None:
    """Atomically write named rank-4 float32 arrays as a checkpoint."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 4:
            raise ValueError(f"checkpoint record {name!r} must be rank-4, got {arr.shape}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<IIII", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    magic = rd.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FmapFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version = rd.u32("version")
    if version != VERSION:
        raise FmapFormatError(f"unsupported version {version}", 4)
    n_records = rd.u32("record count")
    params: dict[str, np.ndarray] = {}
    for i in range(n_records):
        name_len = rd.u32(f"record {i} name length")
        name = rd.take(name_len, f"record {i} name").decode("utf-8")
        n, c, h, w = struct.unpack("<IIII", rd.take(16, f"record {i} dims"))
        raw = rd.take(4 * n * c * h * w, f"record {i} payload")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(n, c, h, w).copy()
    if rd.pos != len(rd.buf):
        raise FmapFormatError(f"{len(rd.buf) - rd.pos} trailing bytes", rd.pos)
    return params
