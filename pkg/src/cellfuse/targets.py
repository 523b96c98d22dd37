"""Training-target synthesis from ground-truth instance label maps.

SM1 marks background / cell body / boundary (instance pixels 8-adjacent to a
different instance or to background). The distance block stores, per pixel,
the inclusive pixel count to the owning instance's extent ends along the
pixel's row and column (left, right, up, down), clipped at dmax and scaled
to [0, 1]. SM2 one-hot-encodes each instance pixel with its instance's type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .labelmap import InstanceLabelMap

DEFAULT_DMAX = 64


@dataclass
class TargetBundle:
    """Channel-first single-image targets."""

    sm1: np.ndarray   # (3, H, W) one-hot: background, body, boundary
    sm2: np.ndarray   # (T+1, H, W) one-hot: background + T types
    dm: np.ndarray    # (4, H, W) scaled distances: left, right, up, down


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Instance pixels 8-adjacent to a different instance or to background.

    Pixels on the image edge count as background-adjacent.
    """
    padded = np.pad(labels, 1, constant_values=0)
    mask = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neigh = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            mask |= neigh != labels
    return mask & (labels > 0)


def _run_extents(labels: np.ndarray):
    """Per-pixel start/end column of the constant-label run through each pixel."""
    h, w = labels.shape
    idx = np.broadcast_to(np.arange(w), (h, w))
    run_start_marker = np.ones((h, w), dtype=bool)
    run_start_marker[:, 1:] = labels[:, 1:] != labels[:, :-1]
    starts = np.where(run_start_marker, idx, 0)
    starts = np.maximum.accumulate(starts, axis=1)
    run_end_marker = np.ones((h, w), dtype=bool)
    run_end_marker[:, :-1] = labels[:, :-1] != labels[:, 1:]
    ends = np.where(run_end_marker, idx, w - 1)
    ends = np.minimum.accumulate(ends[:, ::-1], axis=1)[:, ::-1]
    return starts, ends


def directional_distances(labels: np.ndarray, dmax: int = DEFAULT_DMAX) -> np.ndarray:
    """(4, H, W) inclusive chord distances (left, right, up, down) / dmax."""
    h, w = labels.shape
    fg = labels > 0
    col = np.broadcast_to(np.arange(w), (h, w))
    row = np.broadcast_to(np.arange(h)[:, None], (h, w))

    starts, ends = _run_extents(labels)
    d_left = np.where(fg, col - starts + 1, 0)
    d_right = np.where(fg, ends - col + 1, 0)

    t_starts, t_ends = _run_extents(labels.T)
    d_up = np.where(fg, row - t_starts.T + 1, 0)
    d_down = np.where(fg, t_ends.T - row + 1, 0)

    dm = np.stack([d_left, d_right, d_up, d_down]).astype(np.float32)
    np.clip(dm, 0, dmax, out=dm)
    return dm / float(dmax)


def make_targets(gt: InstanceLabelMap, n_types: int,
                 dmax: int = DEFAULT_DMAX) -> TargetBundle:
    """Derive SM1 / SM2 / distance targets from a validated label map."""
    gt.validate(n_types=n_types)
    labels = gt.labels
    h, w = labels.shape

    boundary = boundary_mask(labels)
    body = (labels > 0) & ~boundary
    sm1 = np.zeros((3, h, w), dtype=np.float32)
    sm1[0] = labels == 0
    sm1[1] = body
    sm1[2] = boundary

    k = int(labels.max(initial=0))
    type_lut = np.zeros(k + 1, dtype=np.int64)
    for i in range(1, k + 1):
        if i in gt.types:
            type_lut[i] = gt.types[i]
        elif (labels == i).any():
            raise DataError(f"instance {i} has no type entry")
    pixel_type = type_lut[labels]
    sm2 = np.zeros((n_types + 1, h, w), dtype=np.float32)
    for t in range(n_types + 1):
        sm2[t] = pixel_type == t

    dm = directional_distances(labels, dmax=dmax)
    return TargetBundle(sm1=sm1, sm2=sm2, dm=dm)
