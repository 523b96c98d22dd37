"""On-disk dataset layout.

Images: 8-bit RGB PNG. Label maps: 16-bit single-channel PNG holding instance
IDs plus a sidecar JSON table mapping id -> type, written with ascending
integer keys and compact separators (byte-exact: ``{"1":2,"2":1}``).
Manifest: one ``<image_path>\\t<label_path>\\t<split>`` line per patch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError
from .labelmap import InstanceLabelMap

SPLITS = ("train", "val", "test")


@dataclass
class ManifestRecord:
    image_path: str
    label_path: str
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


def sidecar_path(label_path: str) -> str:
    stem, _ = os.path.splitext(label_path)
    return f"{stem}.types.json"


def save_image(path: str, image: np.ndarray) -> None:
    """(3, H, W) float in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_label_map(path: str, m: InstanceLabelMap) -> None:
    if m.labels.max(initial=0) > 65535:
        raise DataError("instance IDs exceed 16-bit PNG range")
    arr = m.labels.astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")  # uint16 -> 16-bit grayscale
    table = {str(i): int(m.types[i]) for i in sorted(m.types)}
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(table, separators=(",", ":")))


def load_label_map(path: str) -> InstanceLabelMap:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.int32)
    if arr.ndim != 2:
        raise DataError(f"label PNG must be single-channel, got shape {arr.shape}")
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise DataError(f"missing type sidecar {side}")
    with open(side, encoding="utf-8") as fh:
        table = json.load(fh)
    types = {int(k): int(v) for k, v in table.items()}
    return InstanceLabelMap(arr, types)


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    lines = [f"{r.image_path}\t{r.label_path}\t{r.split}" for r in manifest.records]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path: str) -> DatasetManifest:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise DataError(f"{path}:{lineno}: malformed manifest line {line!r}")
            records.append(ManifestRecord(*parts))
    return DatasetManifest(records)
