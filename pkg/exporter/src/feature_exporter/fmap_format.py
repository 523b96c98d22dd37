"""FMAP byte format: writer and strict validator.

Layout (little-endian): magic "FMAP" (4 bytes), version u32 = 1,
n_levels u32 = 4, then per level: source_block u32, c u32, h u32, w u32,
followed by c*h*w IEEE-754 float32 values row-major. One file per patch.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FMAP"
VERSION = 1
N_LEVELS = 4


class FmapValidationError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_fmap(path: str, levels: list[tuple[int, np.ndarray]]) -> None:
    """Write [(source_block, (c, h, w) float array)] as one FMAP file."""
    if len(levels) != N_LEVELS:
        raise ValueError(f"FMAP files carry exactly {N_LEVELS} levels, got {len(levels)}")
    parts = [MAGIC, struct.pack("<II", VERSION, N_LEVELS)]
    for source_block, arr in levels:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim != 3:
            raise ValueError(f"level array must be (c, h, w), got shape {arr.shape}")
        parts.append(struct.pack("<IIII", source_block, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def validate_fmap_bytes(data: bytes) -> list[tuple[int, int, int, int]]:
    """Check the byte-exact layout; returns (source_block, c, h, w) per level."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FmapValidationError(f"truncated while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FmapValidationError(f"bad magic {data[:4]!r}", 0)
    version, n_levels = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FmapValidationError(f"unsupported version {version}", 4)
    if n_levels != N_LEVELS:
        raise FmapValidationError(f"expected {N_LEVELS} levels, got {n_levels}", 8)
    shapes = []
    for i in range(n_levels):
        source_block, c, h, w = struct.unpack("<IIII", take(16, f"level {i} header"))
        take(4 * c * h * w, f"level {i} payload")
        shapes.append((source_block, c, h, w))
    if pos != len(data):
        raise FmapValidationError(f"{len(data) - pos} trailing bytes", pos)
    return shapes
