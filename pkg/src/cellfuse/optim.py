"""AdamW with decoupled weight decay, and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-4
    final_lr: float = 1e-6
    pct_up: float = 0.3
    total_epochs: int = 100
    steps_per_epoch: int = 1
    div_start: float = 25.0

    def __post_init__(self):
        if not self.final_lr < self.peak_lr:
            raise ConfigError(f"final_lr {self.final_lr} must be < peak_lr {self.peak_lr}")
        if not 0.0 < self.pct_up < 1.0:
            raise ConfigError(f"pct_up must be in (0, 1), got {self.pct_up}")
        if self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("total_epochs and steps_per_epoch must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def onecycle_lr(step: float, cfg: ScheduleConfig) -> float:
    """Cosine ramp from peak_lr/div_start to peak_lr over pct_up of the run,
    then cosine decay to final_lr. Steps beyond the end clamp to final_lr."""
    total = cfg.total_steps
    if step >= total:
        return cfg.final_lr
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    up = cfg.pct_up * total
    start = cfg.peak_lr / cfg.div_start
    if step <= up:
        frac = 0.5 * (1.0 - math.cos(math.pi * step / up))
        return start + (cfg.peak_lr - start) * frac
    tau = (step - up) / (total - up)
    frac = 0.5 * (1.0 + math.cos(math.pi * tau))
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * frac


class AdamW:
    """Decoupled weight decay applied before the bias-corrected moment update.

    Only requires_grad parameters enter the optimized set; frozen tensors
    never appear.
    """

    def __init__(self, params: dict[str, T.Tensor4], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if self.weight_decay != 0.0:
                p.data *= 1.0 - lr * self.weight_decay
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
