"""Pluggable encoders emitting 4-level feature pyramids.

Three sources: a toy hierarchical encoder (dyadic resolution ladder), a toy
isotropic encoder (constant-resolution token grid, pointwise residual mixing
in place of attention), and a reader for externally exported feature dumps.
Also hosts the shallow/deep/mixed block-selection rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fmap
from . import tensor as T
from .errors import ConfigError
from .params import kaiming_conv, zeros_bias

STRATEGIES = ("shallow", "deep", "mixed")


@dataclass
class PyramidLevel:
    tensor: T.Tensor4
    level_index: int          # 1..4
    reduction: int            # target reduction consumed by the decoder: 2, 4, 8 or 16
    source_block: int


@dataclass
class FeaturePyramid:
    """Exactly 4 feature levels plus their source layout (hierarchical/isotropic)."""

    levels: list[PyramidLevel]
    kind: str                 # "hierarchical" | "isotropic"
    input_size: int | None = None

    REDUCTIONS = (2, 4, 8, 16)

    def validate(self) -> None:
        if len(self.levels) != 4:
            raise ConfigError(f"pyramid needs exactly 4 levels, got {len(self.levels)}")
        indices = [lv.level_index for lv in self.levels]
        if indices != sorted(indices) or len(set(indices)) != 4:
            raise ConfigError(f"level_index must be strictly increasing, got {indices}")
        if tuple(lv.reduction for lv in self.levels) != self.REDUCTIONS:
            raise ConfigError("levels must declare reductions (2, 4, 8, 16)")
        shapes = [lv.tensor.shape[1:] for lv in self.levels]
        if self.kind == "isotropic":
            if any(s != shapes[0] for s in shapes):
                raise ConfigError(f"isotropic levels must share (c, h, w), got {shapes}")
        elif self.kind == "hierarchical":
            if self.input_size is not None:
                for lv in self.levels:
                    want = self.input_size // lv.reduction
                    if lv.tensor.shape[2:] != (want, want):
                        raise ConfigError(
                            f"hierarchical level {lv.level_index} is {lv.tensor.shape[2:]}, "
                            f"expected {(want, want)} at reduction {lv.reduction}")
        else:
            raise ConfigError(f"unknown pyramid kind {self.kind!r}")


@dataclass
class EncoderSpec:
    """Declarative encoder choice for configs and the CLI."""

    kind: str                      # hierarchical | isotropic | dump
    n_blocks: int = 12
    patch_size: int = 16           # isotropic only
    input_size: int = 256
    strategy: str = "shallow"
    base_channels: int = 16        # hierarchical stage-1 width
    dim: int = 64                  # isotropic token width

    def __post_init__(self):
        if self.kind not in ("hierarchical", "isotropic", "dump"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.kind == "isotropic":
            if self.input_size % self.patch_size != 0:
                raise ConfigError(
                    f"patch_size {self.patch_size} must divide input_size {self.input_size}")
            select_blocks(self.n_blocks, self.strategy)  # raises if infeasible


# ---------------------------------------------------------------------------
# block selection

# Published feature-block table for 24/32/40-block isotropic encoders. The
# 40-block deep row is irregular and must stay a literal lookup.
_BLOCK_TABLE = {
    (24, "shallow"): (2, 4, 6, 8),
    (32, "shallow"): (2, 4, 6, 8),
    (40, "shallow"): (2, 4, 6, 8),
    (24, "deep"): (17, 19, 21, 23),
    (32, "deep"): (25, 27, 29, 31),
    (40, "deep"): (34, 36, 37, 39),
    (24, "mixed"): (2, 5, 10, 20),
    (32, "mixed"): (2, 5, 14, 28),
    (40, "mixed"): (2, 5, 18, 36),
}


def select_blocks(n_blocks: int, strategy: str) -> tuple[int, int, int, int]:
    """Pick the four 0-based encoder block indices feeding the skip connections.

    shallow is always (2, 4, 6, 8); deep and mixed follow the published table
    for 24/32/40 blocks and a formula elsewhere: deep = (n-7, n-5, n-3, n-1),
    mixed = (2, 5, n//2 - 2, n - 4).
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    key = (n_blocks, strategy)
    if key in _BLOCK_TABLE:
        return _BLOCK_TABLE[key]
    if strategy == "shallow":
        if n_blocks < 9:
            raise ConfigError(f"shallow strategy needs >= 9 blocks, got {n_blocks}")
        return (2, 4, 6, 8)
    if strategy == "deep":
        if n_blocks < 8:
            raise ConfigError(f"deep strategy needs >= 8 blocks, got {n_blocks}")
        return (n_blocks - 7, n_blocks - 5, n_blocks - 3, n_blocks - 1)
    if n_blocks < 16:
        raise ConfigError(f"mixed strategy needs >= 16 blocks, got {n_blocks}")
    return (2, 5, n_blocks // 2 - 2, n_blocks - 4)


# ---------------------------------------------------------------------------
# toy encoders

class ToyHierarchicalEncoder:
    """Four stages of [stride-2 conv -> 2x (conv3x3 + relu)].

    Stage i outputs base*2**(i-1) channels at reduction 2**i, so a 64x64
    input with base 16 yields (16,32,32), (32,16,16), (64,8,8), (128,4,4).
    """

    kind = "hierarchical"

    def __init__(self, base_channels: int = 16, in_channels: int = 3, seed: int = 0):
        self.base_channels = base_channels
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params: dict[str, T.Tensor4] = {}
        c_in = in_channels
        for stage in range(1, 5):
            c_out = base_channels * 2 ** (stage - 1)
            self._add(rng, f"stage{stage}.down", c_out, c_in, 3)
            self._add(rng, f"stage{stage}.conv1", c_out, c_out, 3)
            self._add(rng, f"stage{stage}.conv2", c_out, c_out, 3)
            c_in = c_out

    def _add(self, rng, name, c_out, c_in, k):
        self.params[f"{name}.w"] = kaiming_conv(rng, c_out, c_in, k)
        self.params[f"{name}.b"] = zeros_bias(c_out)

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def forward(self, image: T.Tensor4) -> FeaturePyramid:
        n, c, h, w = image.shape
        if h != w or h % 16 != 0:
            raise T.ShapeError(f"input must be square with side divisible by 16, got {h}x{w}")
        x = image
        levels = []
        for stage in range(1, 5):
            p = self.params
            x = T.conv2d(x, p[f"stage{stage}.down.w"], p[f"stage{stage}.down.b"],
                         stride=2, padding=1)
            x = T.relu(T.conv2d(x, p[f"stage{stage}.conv1.w"], p[f"stage{stage}.conv1.b"], padding=1))
            x = T.relu(T.conv2d(x, p[f"stage{stage}.conv2.w"], p[f"stage{stage}.conv2.b"], padding=1))
            levels.append(PyramidLevel(x, stage, 2 ** stage, source_block=stage - 1))
        pyr = FeaturePyramid(levels, "hierarchical", input_size=h)
        pyr.validate()
        return pyr


class ToyIsotropicEncoder:
    """Patchify then pointwise residual mixing blocks at constant resolution.

    Emits the block outputs named by select_blocks(n_blocks, strategy); every
    level shares shape (dim, H/patch, W/patch). Attention is intentionally
    absent: the decoder contract only needs constant-resolution multi-block
    features.
    """

    kind = "isotropic"

    def __init__(self, dim: int = 64, patch_size: int = 16, n_blocks: int = 12,
                 strategy: str = "shallow", in_channels: int = 3, seed: int = 0):
        self.dim = dim
        self.patch_size = patch_size
        self.n_blocks = n_blocks
        self.block_indices = select_blocks(n_blocks, strategy)
        self.frozen = False
        rng = np.random.default_rng(seed)
        self.params: dict[str, T.Tensor4] = {
            "patch.w": kaiming_conv(rng, dim, in_channels, patch_size),
            "patch.b": zeros_bias(dim),
        }
        for i in range(n_blocks):
            self.params[f"block{i}.fc1.w"] = kaiming_conv(rng, dim, dim, 1)
            self.params[f"block{i}.fc1.b"] = zeros_bias(dim)
            self.params[f"block{i}.fc2.w"] = kaiming_conv(rng, dim, dim, 1)
            self.params[f"block{i}.fc2.b"] = zeros_bias(dim)

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def forward(self, image: T.Tensor4) -> FeaturePyramid:
        n, c, h, w = image.shape
        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise T.ShapeError(f"patch size {self.patch_size} must divide input {h}x{w}")
        p = self.params
        x = T.conv2d(image, p["patch.w"], p["patch.b"], stride=self.patch_size,
                     _allow_any_kernel=True)
        wanted = {b: i for i, b in enumerate(self.block_indices)}
        picked: dict[int, T.Tensor4] = {}
        for i in range(self.n_blocks):
            mid = T.relu(T.conv2d(x, p[f"block{i}.fc1.w"], p[f"block{i}.fc1.b"]))
            out = T.conv2d(mid, p[f"block{i}.fc2.w"], p[f"block{i}.fc2.b"])
            x = T.add(x, out)
            if i in wanted:
                picked[i] = x
        levels = [PyramidLevel(picked[b], li + 1, FeaturePyramid.REDUCTIONS[li], source_block=b)
                  for li, b in enumerate(self.block_indices)]
        pyr = FeaturePyramid(levels, "isotropic", input_size=h)
        pyr.validate()
        return pyr


def build_encoder(spec: EncoderSpec, seed: int = 0):
    if spec.kind == "hierarchical":
        return ToyHierarchicalEncoder(base_channels=spec.base_channels, seed=seed)
    if spec.kind == "isotropic":
        return ToyIsotropicEncoder(dim=spec.dim, patch_size=spec.patch_size,
                                   n_blocks=spec.n_blocks, strategy=spec.strategy, seed=seed)
    raise ConfigError(f"build_encoder cannot construct kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# feature dumps

def write_feature_dump(path: str, pyramid: FeaturePyramid) -> None:
    """Serialize a single-sample pyramid to an FMAP file."""
    records = []
    for lv in pyramid.levels:
        if lv.tensor.shape[0] != 1:
            raise ConfigError("feature dumps hold one sample per file")
        records.append((lv.source_block, lv.tensor.data[0]))
    fmap.write_levels(path, records)


def read_feature_dump(path: str) -> FeaturePyramid:
    """Read an FMAP file as a non-trainable pyramid.

    Kind is inferred from the level shapes: identical (c, h, w) everywhere is
    isotropic, a dyadic resolution ladder is hierarchical.
    """
    records = fmap.read_levels(path)
    if len(records) != 4:
        raise fmap.FmapFormatError(f"expected 4 levels, file declares {len(records)}", 8)
    shapes = [arr.shape for _, arr in records]
    if all(s == shapes[0] for s in shapes):
        kind = "isotropic"
    else:
        kind = "hierarchical"
        for a, b in zip(shapes, shapes[1:]):
            if a[1] != 2 * b[1] or a[2] != 2 * b[2]:
                raise fmap.FmapFormatError(
                    f"levels are neither equal-shape nor a dyadic ladder: {shapes}", 8)
    levels = [
        PyramidLevel(T.Tensor4(arr[None].astype(np.float32)), i + 1,
                     FeaturePyramid.REDUCTIONS[i], source_block=sb)
        for i, (sb, arr) in enumerate(records)
    ]
    pyr = FeaturePyramid(levels, kind)
    pyr.validate()
    return pyr
