"""Instance label maps: integer ID grids plus per-instance cell types."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class InstanceLabelMap:
    """H x W grid of instance IDs (0 = background) and an ID -> type table."""

    labels: np.ndarray
    types: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise DataError(f"label map must be integer, got {self.labels.dtype}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_instances(self) -> int:
        return int(self.labels.max(initial=0))

    def ids(self) -> np.ndarray:
        present = np.unique(self.labels)
        return present[present > 0]

    def validate(self, n_types: int | None = None) -> None:
        ids = self.ids()
        k = len(ids)
        if k and (ids[0] != 1 or ids[-1] != k):
            raise DataError(f"instance IDs must be consecutive 1..K, got {ids.tolist()}")
        for i in ids:
            t = self.types.get(int(i))
            if t is None:
                raise DataError(f"instance {int(i)} has no type entry")
            if t < 1 or (n_types is not None and t > n_types):
                raise DataError(f"instance {int(i)} has invalid type {t}")

    def renumbered(self) -> "InstanceLabelMap":
        """Relabel to consecutive 1..K in raster order of each ID's first pixel."""
        flat = self.labels.reshape(-1)
        maxl = int(flat.max(initial=0))
        if maxl == 0:
            return InstanceLabelMap(self.labels.copy(), {})
        first = np.full(maxl + 1, flat.size, dtype=np.int64)
        np.minimum.at(first, flat, np.arange(flat.size))
        old_ids = np.nonzero(first[1:] < flat.size)[0] + 1
        order = old_ids[np.argsort(first[old_ids], kind="stable")]
        remap = np.zeros(maxl + 1, dtype=self.labels.dtype)
        remap[order] = np.arange(1, len(order) + 1, dtype=self.labels.dtype)
        new_types = {int(remap[o]): self.types[int(o)] for o in order if int(o) in self.types}
        return InstanceLabelMap(remap[self.labels], new_types)
