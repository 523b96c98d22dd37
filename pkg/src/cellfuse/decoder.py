"""Fusion decoder and prediction heads.

Skip features are 1x1-projected to fixed channel widths (32, 64, 128, 256) at
reductions (2, 4, 8, 16), then fused deepest-first: upsample x2, concatenate
with the skip, 3x3 conv, relu. Three independent convolutional heads map the
fused full-resolution features to 3-class semantics, T+1-class cell types and
a sigmoid-bounded 4-channel distance block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fmap
from . import tensor as T
from .encoders import FeaturePyramid
from .errors import ConfigError
from .params import kaiming_conv, param_count, zeros_bias

HEAD_NAMES = ("sm1", "sm2", "dm")


@dataclass
class DecoderConfig:
    n_cell_types: int
    input_size: int
    skip_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    skip_reductions: tuple[int, int, int, int] = (2, 4, 8, 16)
    skip_upsample_mode: str = "bilinear"
    body_upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.n_cell_types < 1:
            raise ConfigError(f"n_cell_types must be >= 1, got {self.n_cell_types}")
        if len(self.skip_channels) != 4 or len(self.skip_reductions) != 4:
            raise ConfigError("skip_channels and skip_reductions need exactly 4 entries")
        for r in self.skip_reductions:
            if self.input_size % r != 0:
                raise ConfigError(f"reduction {r} must divide input_size {self.input_size}")

    @property
    def head_channels(self) -> dict[str, int]:
        return {"sm1": 3, "sm2": self.n_cell_types + 1, "dm": 4}


@dataclass
class HeadOutputs:
    """Per-head outputs sharing the input's (n, H, W)."""

    sm1_logits: T.Tensor4   # (n, 3, H, W)
    sm2_logits: T.Tensor4   # (n, T+1, H, W)
    dm: T.Tensor4           # (n, 4, H, W), sigmoid-bounded to [0, 1]


class DecoderHeads:
    """Trainable decoder + heads over a 4-level pyramid with known channel widths."""

    def __init__(self, cfg: DecoderConfig, in_channels: tuple[int, int, int, int],
                 seed: int = 0):
        self.cfg = cfg
        self.in_channels = tuple(in_channels)
        rng = np.random.default_rng(seed)
        s = cfg.skip_channels
        self.params: dict[str, T.Tensor4] = {}
        for i in range(4):
            self._add(rng, f"proj{i + 1}", s[i], self.in_channels[i], 1)
        for i in (3, 2, 1):
            self._add(rng, f"fuse{i}", s[i - 1], s[i] + s[i - 1], 3)
        self._add(rng, "final", 32, s[0], 3)
        for name, k_out in cfg.head_channels.items():
            self._add(rng, f"head_{name}.conv", 32, 32, 3)
            self._add(rng, f"head_{name}.out", k_out, 32, 1)

    def _add(self, rng, name, c_out, c_in, k):
        self.params[f"{name}.w"] = kaiming_conv(rng, c_out, c_in, k)
        self.params[f"{name}.b"] = zeros_bias(c_out)

    def num_params(self) -> int:
        return param_count(self.params)

    def head_param_names(self, head: str) -> list[str]:
        prefix = f"head_{head}."
        return [k for k in self.params if k.startswith(prefix)]

    # -- stages ------------------------------------------------------------

    def project_skips(self, pyramid: FeaturePyramid) -> list[T.Tensor4]:
        """1x1-project each level to its contract width, upsampling to target
        resolution when the source grid is coarser (isotropic sources)."""
        pyramid.validate()
        cfg = self.cfg
        out = []
        for i, lv in enumerate(pyramid.levels):
            target = cfg.input_size // cfg.skip_reductions[i]
            h = lv.tensor.shape[2]
            if h > target:
                raise ConfigError(
                    f"level {lv.level_index} resolution {h} exceeds target {target}; "
                    "downsampling skips is unsupported")
            if target % h != 0:
                raise ConfigError(
                    f"level {lv.level_index} resolution {h} does not divide target {target}")
            x = T.conv2d(lv.tensor, self.params[f"proj{i + 1}.w"], self.params[f"proj{i + 1}.b"])
            if target != h:
                x = T.upsample(x, target // h, cfg.skip_upsample_mode)
            out.append(x)
        return out

    def decode(self, skips: list[T.Tensor4]) -> T.Tensor4:
        """Deepest skip seeds the decoder; fuse upward, then lift to full res."""
        cfg = self.cfg
        x = skips[3]
        for i in (3, 2, 1):
            up = T.upsample(x, 2, cfg.body_upsample_mode)
            cat = T.concat_channels(up, skips[i - 1])
            x = T.relu(T.conv2d(cat, self.params[f"fuse{i}.w"], self.params[f"fuse{i}.b"], padding=1))
        up = T.upsample(x, 2, cfg.body_upsample_mode)
        return T.relu(T.conv2d(up, self.params["final.w"], self.params["final.b"], padding=1))

    def heads(self, fused: T.Tensor4) -> HeadOutputs:
        outs = {}
        for name in HEAD_NAMES:
            h = T.relu(T.conv2d(fused, self.params[f"head_{name}.conv.w"],
                                self.params[f"head_{name}.conv.b"], padding=1))
            outs[name] = T.conv2d(h, self.params[f"head_{name}.out.w"],
                                  self.params[f"head_{name}.out.b"])
        return HeadOutputs(sm1_logits=outs["sm1"], sm2_logits=outs["sm2"],
                           dm=T.sigmoid(outs["dm"]))

    def forward(self, pyramid: FeaturePyramid) -> HeadOutputs:
        return self.heads(self.decode(self.project_skips(pyramid)))

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        fmap.save_params(path, {k: p.data for k, p in self.params.items()})

    def load(self, path: str) -> None:
        stored = fmap.load_params(path)
        missing = set(self.params) ^ set(stored)
        if missing:
            raise ConfigError(f"checkpoint does not match model, differing keys: {sorted(missing)}")
        for k, arr in stored.items():
            if arr.shape != self.params[k].shape:
                raise ConfigError(
                    f"checkpoint record {k} has shape {arr.shape}, model expects {self.params[k].shape}")
            self.params[k].data = arr.astype(np.float32)
