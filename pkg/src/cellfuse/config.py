"""Flat key=value run configuration; unknown keys are rejected.

Every key has a documented default below; `#` starts a comment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .decoder import DecoderConfig
from .encoders import EncoderSpec
from .errors import ConfigError
from .losses import LossConfig
from .postproc import PostprocParams


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    input_size: int = 256
    n_cell_types: int = 3
    encoder_kind: str = "hierarchical"        # hierarchical | isotropic | dump
    encoder_strategy: str = "shallow"         # shallow | deep | mixed
    encoder_n_blocks: int = 12
    encoder_patch_size: int = 16
    encoder_base_channels: int = 16
    encoder_dim: int = 64
    loss_w_ce1: float = 1.0
    loss_w_dice: float = 1.0
    loss_w_mae: float = 1.0
    loss_w_ce2: float = 1.0
    loss_w_tversky: float = 1.0
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    dice_smooth: float = 1.0
    lr_peak: float = 1e-4
    lr_final: float = 1e-6
    pct_up: float = 0.3
    div_start: float = 25.0
    epochs: int = 100
    batch_size: int = 8
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    oversample: bool = True
    dmax: int = 64
    min_seed_area: int = 10
    r_max: float = 32.0
    data_dir: str = "data"
    out_dir: str = "runs/default"

    # -- construction ------------------------------------------------------

    @classmethod
    def parsers(cls):
        out = {}
        for f in fields(cls):
            if f.type in ("bool", bool):
                out[f.name] = _bool
            elif f.type in ("int", int):
                out[f.name] = int
            elif f.type in ("float", float):
                out[f.name] = float
            else:
                out[f.name] = str
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "RunConfig":
        parsers = cls.parsers()
        unknown = set(values) - set(parsers)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            try:
                kwargs[key] = parsers[key](raw)
            except (ValueError, TypeError) as err:
                raise ConfigError(f"config key {key}={raw!r}: {err}") from err
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        values: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key in values:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                values[key] = value.strip()
        return cls.from_dict(values)

    # -- derived component configs ------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(kind=self.encoder_kind, n_blocks=self.encoder_n_blocks,
                           patch_size=self.encoder_patch_size, input_size=self.input_size,
                           strategy=self.encoder_strategy,
                           base_channels=self.encoder_base_channels, dim=self.encoder_dim)

    def loss_config(self) -> LossConfig:
        return LossConfig(w_ce1=self.loss_w_ce1, w_dice=self.loss_w_dice,
                          w_mae=self.loss_w_mae, w_ce2=self.loss_w_ce2,
                          w_tversky=self.loss_w_tversky,
                          tversky_alpha=self.tversky_alpha, tversky_beta=self.tversky_beta,
                          dice_smooth=self.dice_smooth)

    def postproc_params(self) -> PostprocParams:
        return PostprocParams(min_seed_area=self.min_seed_area, r_max=self.r_max,
                              dmax=self.dmax)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(n_cell_types=self.n_cell_types, input_size=self.input_size)

    def dump_defaults(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))
