"""Composite training loss: CE + Dice on the 3-class map, MAE on distances,
CE + Tversky on the cell-type map.

Each term is a dedicated graph node differentiating w.r.t. the probability
tensors (softmax outputs) or the raw distance block; Dice and Tversky are
computed per class over the whole batch on soft probabilities, smoothed, then
class-averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import HeadOutputs

_EPS = 1e-12


class TrainingAbort(RuntimeError):
    """A loss term went non-finite; the message names the term."""


@dataclass
class LossConfig:
    w_ce1: float = 1.0
    w_dice: float = 1.0
    w_mae: float = 1.0
    w_ce2: float = 1.0
    w_tversky: float = 1.0
    tversky_alpha: float = 0.3   # false-positive weight
    tversky_beta: float = 0.7    # false-negative weight
    dice_smooth: float = 1.0

    def __post_init__(self):
        weights = (self.w_ce1, self.w_dice, self.w_mae, self.w_ce2, self.w_tversky)
        if any(w < 0 for w in weights):
            raise ValueError(f"loss weights must be >= 0, got {weights}")
        if self.tversky_alpha + self.tversky_beta <= 0:
            raise ValueError("tversky_alpha + tversky_beta must be > 0")


@dataclass
class TargetBatch:
    """Stacked (n, c, h, w) training targets."""

    sm1: np.ndarray   # (n, 3, h, w) one-hot
    sm2: np.ndarray   # (n, T+1, h, w) one-hot
    dm: np.ndarray    # (n, 4, h, w) in [0, 1]

    @classmethod
    def from_bundles(cls, bundles) -> "TargetBatch":
        return cls(sm1=np.stack([b.sm1 for b in bundles]).astype(np.float32),
                   sm2=np.stack([b.sm2 for b in bundles]).astype(np.float32),
                   dm=np.stack([b.dm for b in bundles]).astype(np.float32))


def _check_shapes(pred: T.Tensor4, target: np.ndarray, term: str) -> None:
    if pred.shape != target.shape:
        raise T.ShapeError(f"{term}: prediction {pred.shape} vs target {target.shape}")


def cross_entropy(probs: T.Tensor4, target: np.ndarray) -> T.Tensor4:
    """Mean over pixels of -sum_c t*log(p); p must already be normalized."""
    _check_shapes(probs, target, "cross_entropy")
    n, _, h, w = probs.shape
    npix = n * h * w
    p = np.maximum(probs.data, _EPS)
    val = float(-(target * np.log(p)).sum() / npix)
    out = np.array(val, dtype=probs.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if not probs.requires_grad:
            return [None]
        return [-g.reshape(()) * target / p / npix]

    return T.from_op(out, (probs,), "cross_entropy", backward_fn)


def soft_dice_loss(probs: T.Tensor4, target: np.ndarray, smooth: float = 1.0) -> T.Tensor4:
    """1 - class-averaged soft Dice over the batch."""
    _check_shapes(probs, target, "soft_dice")
    c = probs.shape[1]
    axes = (0, 2, 3)
    inter = (probs.data * target).sum(axis=axes)
    psum = probs.data.sum(axis=axes)
    tsum = target.sum(axis=axes)
    denom = psum + tsum + smooth
    dice = (2.0 * inter + smooth) / denom
    val = float(1.0 - dice.mean())
    out = np.array(val, dtype=probs.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if not probs.requires_grad:
            return [None]
        # d dice_c / dp = (2t*denom - (2I+smooth)) / denom^2, averaged over classes
        num = 2.0 * target * denom[None, :, None, None] - (2.0 * inter + smooth)[None, :, None, None]
        ddice = num / (denom ** 2)[None, :, None, None]
        return [-g.reshape(()) * ddice / c]

    return T.from_op(out, (probs,), "soft_dice", backward_fn)


def mae_loss(pred: T.Tensor4, target: np.ndarray) -> T.Tensor4:
    """Mean absolute error over every element."""
    _check_shapes(pred, target, "mae")
    diff = pred.data - target
    val = float(np.abs(diff).mean())
    out = np.array(val, dtype=pred.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if not pred.requires_grad:
            return [None]
        return [g.reshape(()) * np.sign(diff) / diff.size]

    return T.from_op(out, (pred,), "mae", backward_fn)


def tversky_loss(probs: T.Tensor4, target: np.ndarray, alpha: float = 0.3,
                 beta: float = 0.7, smooth: float = 1.0) -> T.Tensor4:
    """1 - class-averaged Tversky index TP/(TP + alpha*FP + beta*FN), smoothed."""
    _check_shapes(probs, target, "tversky")
    c = probs.shape[1]
    axes = (0, 2, 3)
    p = probs.data
    tp = (p * target).sum(axis=axes)
    fp = (p * (1.0 - target)).sum(axis=axes)
    fn = ((1.0 - p) * target).sum(axis=axes)
    num = tp + smooth
    den = tp + alpha * fp + beta * fn + smooth
    ti = num / den
    val = float(1.0 - ti.mean())
    out = np.array(val, dtype=probs.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        if not probs.requires_grad:
            return [None]
        # dnum/dp = t; dden/dp = t + alpha*(1-t) - beta*t
        dnum = target
        dden = target * (1.0 - alpha - beta) + alpha
        dti = (dnum * den[None, :, None, None] - num[None, :, None, None] * dden) \
            / (den ** 2)[None, :, None, None]
        return [-g.reshape(()) * dti / c]

    return T.from_op(out, (probs,), "tversky", backward_fn)


def composite_loss(pred: HeadOutputs, targets: TargetBatch,
                   cfg: LossConfig) -> tuple[T.Tensor4, dict[str, float]]:
    """Weighted sum of the five terms plus a per-term float breakdown.

    Raises TrainingAbort naming the first non-finite term.
    """
    sm1_probs = T.softmax_channels(pred.sm1_logits)
    sm2_probs = T.softmax_channels(pred.sm2_logits)
    terms = {
        "ce1": (cfg.w_ce1, cross_entropy(sm1_probs, targets.sm1)),
        "dice": (cfg.w_dice, soft_dice_loss(sm1_probs, targets.sm1, cfg.dice_smooth)),
        "mae": (cfg.w_mae, mae_loss(pred.dm, targets.dm)),
        "ce2": (cfg.w_ce2, cross_entropy(sm2_probs, targets.sm2)),
        "tversky": (cfg.w_tversky, tversky_loss(sm2_probs, targets.sm2,
                                                cfg.tversky_alpha, cfg.tversky_beta,
                                                cfg.dice_smooth)),
    }
    breakdown = {}
    total = None
    for name, (weight, node) in terms.items():
        value = node.item()
        if not math.isfinite(value):
            raise TrainingAbort(f"loss term {name!r} is non-finite ({value})")
        breakdown[name] = value
        weighted = T.scale(node, weight)
        total = weighted if total is None else T.add(total, weighted)
    breakdown["total"] = total.item()
    return total, breakdown
