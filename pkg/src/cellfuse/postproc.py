"""Instance recovery from predicted maps.

Body-pixel connected components seed the instances; every other foreground
pixel projects a center estimate from the distance block and joins the seed
with the nearest centroid. Leftovers adopt the majority 8-neighbor label,
iterated to fixpoint. All tie-breaks are fixed so identical inputs give
bit-identical label maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .labelmap import InstanceLabelMap

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_NEIGHBOR_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                     if (dy, dx) != (0, 0)]


@dataclass
class PostprocParams:
    min_seed_area: int = 10
    r_max: float = 32.0
    dmax: int = 64


def _seed_components(body: np.ndarray, min_area: int):
    """4-connected body components with area >= min_area, compactly relabeled."""
    raw, n_raw = ndimage.label(body, structure=FOUR_CONN)
    if n_raw == 0:
        return np.zeros_like(raw), 0, np.zeros((0, 2))
    areas = np.bincount(raw.reshape(-1), minlength=n_raw + 1)
    keep = np.nonzero(areas[1:] >= min_area)[0] + 1
    remap = np.zeros(n_raw + 1, dtype=raw.dtype)
    remap[keep] = np.arange(1, len(keep) + 1, dtype=raw.dtype)
    seeds = remap[raw]
    k = len(keep)
    if k == 0:
        return seeds, 0, np.zeros((0, 2))
    ys, xs = np.nonzero(seeds)
    vals = seeds[ys, xs]
    counts = np.bincount(vals, minlength=k + 1)[1:]
    cy = np.bincount(vals, weights=ys, minlength=k + 1)[1:] / counts
    cx = np.bincount(vals, weights=xs, minlength=k + 1)[1:] / counts
    return seeds, k, np.stack([cy, cx], axis=1)


def _majority_vote_fill(labels: np.ndarray, pending: np.ndarray) -> np.ndarray:
    """Unlabeled foreground adopts the majority nonzero 8-neighbor label,
    simultaneous updates iterated to fixpoint; ties pick the lowest label."""
    labels = labels.copy()
    h, w = labels.shape
    while True:
        ys, xs = np.nonzero(pending & (labels == 0))
        if ys.size == 0:
            break
        padded = np.pad(labels, 1, constant_values=0)
        neigh = np.stack([padded[1 + dy + ys, 1 + dx + xs]
                          for dy, dx in _NEIGHBOR_OFFSETS])        # (8, M)
        neigh.sort(axis=0)
        best = np.zeros(ys.size, dtype=labels.dtype)
        best_count = np.zeros(ys.size, dtype=np.int64)
        run_val = neigh[0].copy()
        run_len = np.ones(ys.size, dtype=np.int64)
        for r in range(1, 8 + 1):
            if r < 8:
                same = neigh[r] == run_val
            else:
                same = np.zeros(ys.size, dtype=bool)
            closing = ~same
            nz = closing & (run_val > 0)
            better = nz & (run_len > best_count)   # strict: ties keep lowest label
            best[better] = run_val[better]
            best_count[better] = run_len[better]
            if r < 8:
                run_val = np.where(same, run_val, neigh[r])
                run_len = np.where(same, run_len + 1, 1)
        changed = best > 0
        if not changed.any():
            break
        labels[ys[changed], xs[changed]] = best[changed]
    return labels


def postprocess(sm1_probs: np.ndarray, sm2_probs: np.ndarray, dm: np.ndarray,
                params: PostprocParams | None = None) -> InstanceLabelMap:
    """Predicted (3,H,W)/(T+1,H,W)/(4,H,W) maps -> typed instance label map."""
    params = params or PostprocParams()
    cls = sm1_probs.argmax(axis=0)
    body = cls == 1
    foreground = cls > 0

    seeds, k, centroids = _seed_components(body, params.min_seed_area)
    if k == 0:
        return InstanceLabelMap(np.zeros(cls.shape, dtype=np.int32), {})

    labels = seeds.astype(np.int32)
    ys, xs = np.nonzero(foreground & (labels == 0))
    if ys.size:
        half = params.dmax / 2.0
        qx = xs + (dm[1, ys, xs] - dm[0, ys, xs]) * half
        qy = ys + (dm[3, ys, xs] - dm[2, ys, xs]) * half
        d2 = (qy[:, None] - centroids[None, :, 0]) ** 2 \
            + (qx[:, None] - centroids[None, :, 1]) ** 2
        nearest = d2.argmin(axis=1)                  # ties resolve to lowest seed label
        within = d2[np.arange(ys.size), nearest] <= params.r_max ** 2
        labels[ys[within], xs[within]] = (nearest[within] + 1).astype(np.int32)

    labels = _majority_vote_fill(labels, foreground)
    result = InstanceLabelMap(labels, {}).renumbered()
    result.types = _assign_types(result.labels, sm2_probs)
    return result


def _assign_types(labels: np.ndarray, sm2_probs: np.ndarray) -> dict[int, int]:
    """Majority vote of per-pixel argmax classes (background votes discarded);
    ties break to the highest mean probability, then the lowest class index.
    Instances whose pixels all vote background fall back to mean probability."""
    k = int(labels.max(initial=0))
    if k == 0:
        return {}
    n_classes = sm2_probs.shape[0]
    pixel_vote = sm2_probs.argmax(axis=0)
    types: dict[int, int] = {}
    for i in range(1, k + 1):
        mask = labels == i
        votes = np.bincount(pixel_vote[mask], minlength=n_classes)[1:]
        mean_probs = sm2_probs[1:, mask].mean(axis=1)
        if votes.max(initial=0) > 0:
            top = votes.max()
            tied = np.nonzero(votes == top)[0]
        else:
            tied = np.arange(n_classes - 1)
        if len(tied) > 1:
            best_prob = mean_probs[tied].max()
            tied = tied[mean_probs[tied] == best_prob]
        types[i] = int(tied[0]) + 1
    return types
