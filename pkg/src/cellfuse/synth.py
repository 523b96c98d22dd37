"""Synthetic labeled scenes plus dataset splitting, oversampling, augmentation.

Scenes are rendered ellipses with type-dependent base color and additive
noise. Instances may touch (limited contact) but never overlap: a pixel
belongs to the instance that claimed it first. Everything is deterministic
in the seed, so the full pipeline runs with zero external downloads.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .labelmap import InstanceLabelMap
from .targets import boundary_mask

SPLIT_FRACTIONS = (0.70, 0.10, 0.20)
AUGMENT_OPS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")

# muted staining-like palette, one base RGB per cell type (cycled past 8)
_PALETTE = np.array([
    (0.45, 0.25, 0.55), (0.25, 0.35, 0.65), (0.60, 0.30, 0.30),
    (0.30, 0.55, 0.35), (0.55, 0.45, 0.20), (0.35, 0.25, 0.25),
    (0.25, 0.50, 0.55), (0.50, 0.30, 0.50),
], dtype=np.float32)

_BACKGROUND = 0.88


@dataclass
class SceneSpec:
    size: int = 256
    instance_count: tuple[int, int] = (8, 16)
    radius_range: tuple[float, float] = (4.0, 12.0)
    n_types: int = 3
    type_frequencies: tuple[float, ...] | None = None
    touch_probability: float = 0.2
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] < 2:
            raise ConfigError(f"radii must be >= 2, got {self.radius_range}")
        if self.type_frequencies is None:
            self.type_frequencies = tuple(1.0 / self.n_types for _ in range(self.n_types))
        if len(self.type_frequencies) != self.n_types:
            raise ConfigError("type_frequencies length must equal n_types")
        if abs(sum(self.type_frequencies) - 1.0) > 1e-6:
            raise ConfigError(f"type_frequencies must sum to 1, got {self.type_frequencies}")


def _ellipse_mask(size, cy, cx, ry, rx, angle):
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    return u * u + v * v <= 1.0


def _contact_fraction(candidate: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of the candidate's border pixels 8-adjacent to existing instances."""
    border = candidate & boundary_mask(candidate.astype(np.int32))
    if not border.any():
        border = candidate
    padded = np.pad(labels, 1, constant_values=0)
    h, w = labels.shape
    near_existing = np.zeros_like(candidate)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            near_existing |= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] > 0
    return float((border & near_existing).sum()) / float(border.sum())


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, InstanceLabelMap]:
    """Render one scene: float32 (3, H, W) image in [0, 1] plus its label map.

    Contact between instances stays under 25% of the newcomer's border, and
    non-touching placements keep a one-pixel background gap. Infeasible
    packings fall back to fewer instances with a warning.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    labels = np.zeros((size, size), dtype=np.int32)
    lo, hi = spec.instance_count
    want = int(rng.integers(lo, hi + 1))
    types: dict[int, int] = {}
    next_id = 1
    for _ in range(want):
        allow_touch = rng.random() < spec.touch_probability
        placed = False
        for _attempt in range(40):
            ry = rng.uniform(*spec.radius_range)
            rx = rng.uniform(*spec.radius_range)
            margin = max(ry, rx)
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            angle = rng.uniform(0, math.pi)
            cand = _ellipse_mask(size, cy, cx, ry, rx, angle)
            fresh = cand & (labels == 0)
            if fresh.sum() < 0.9 * cand.sum() or fresh.sum() < 8:
                continue  # would overlap too much
            contact = _contact_fraction(fresh, labels)
            if allow_touch:
                if contact > 0.25:
                    continue
            elif contact > 0.0:
                continue
            labels[fresh] = next_id
            types[next_id] = int(rng.choice(spec.n_types, p=spec.type_frequencies)) + 1
            next_id += 1
            placed = True
            break
        if not placed:
            warnings.warn(f"scene seed {spec.seed}: placed {next_id - 1} of {want} instances",
                          stacklevel=2)
            break

    gt = InstanceLabelMap(labels, types).renumbered()

    image = np.full((3, size, size), _BACKGROUND, dtype=np.float32)
    for i in gt.ids():
        base = _PALETTE[(gt.types[int(i)] - 1) % len(_PALETTE)]
        jitter = rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
        mask = gt.labels == i
        image[:, mask] = (base + jitter)[:, None]
    image += rng.normal(0.0, spec.noise_level, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    return image, gt


# ---------------------------------------------------------------------------
# splitting, oversampling, augmentation

def split_dataset(n_items: int, seed: int = 0) -> list[str]:
    """Deterministic shuffled 70/10/20 split tags, floor-then-remainder."""
    if n_items < 10:
        raise DataError(f"need at least 10 patches to split, got {n_items}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_items)
    n_train = int(math.floor(SPLIT_FRACTIONS[0] * n_items))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n_items))
    tags = [""] * n_items
    for rank, idx in enumerate(order):
        if rank < n_train:
            tags[idx] = "train"
        elif rank < n_train + n_val:
            tags[idx] = "val"
        else:
            tags[idx] = "test"
    return tags


def oversample(records: list, class_pixels: list[dict[int, int]], n_types: int,
               seed: int = 0) -> list:
    """Duplicate patches containing classes rarer than the median class.

    A patch holding any class with global pixel frequency below the median
    appears ceil(median/freq) times, capped at 5. Output order is shuffled.
    """
    if len(records) != len(class_pixels):
        raise DataError("records and class_pixels must align")
    freq = np.zeros(n_types + 1, dtype=np.float64)
    for counts in class_pixels:
        for t, c in counts.items():
            freq[t] += c
    class_freq = freq[1:]
    median = float(np.median(class_freq))
    expanded = []
    for rec, counts in zip(records, class_pixels):
        copies = 1
        for t, c in counts.items():
            if c <= 0:
                continue
            f = class_freq[t - 1]
            if f < median:
                copies = max(copies, min(5, math.ceil(median / f)))
        expanded.extend([rec] * copies)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(expanded))
    return [expanded[i] for i in order]


def _apply_op(op: str, image: np.ndarray, labels: np.ndarray):
    if op == "identity":
        return image.copy(), labels.copy()
    if op == "hflip":
        return image[:, :, ::-1].copy(), labels[:, ::-1].copy()
    if op == "vflip":
        return image[:, ::-1, :].copy(), labels[::-1, :].copy()
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return (np.rot90(image, k, axes=(1, 2)).copy(),
            np.rot90(labels, k, axes=(0, 1)).copy())


def augment(image: np.ndarray, gt: InstanceLabelMap, seed: int,
            op: str | None = None) -> tuple[np.ndarray, InstanceLabelMap]:
    """One dihedral transform of image and label map together.

    Distance targets must be regenerated from the returned map, never
    transformed channelwise.
    """
    if op is None:
        rng = np.random.default_rng(seed)
        op = AUGMENT_OPS[int(rng.integers(0, len(AUGMENT_OPS)))]
    img, labels = _apply_op(op, image, gt.labels)
    return img, InstanceLabelMap(labels, dict(gt.types))
