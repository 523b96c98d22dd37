"""Training loop: frozen encoder, AdamW on the decoder, one-cycle schedule,
best-on-validation checkpointing, loss-curve CSV."""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, DecoderHeads, HeadOutputs
from .encoders import EncoderSpec, FeaturePyramid, PyramidLevel, build_encoder
from .errors import ConfigError
from .labelmap import InstanceLabelMap
from .losses import LossConfig, TargetBatch, composite_loss
from .optim import AdamW, ScheduleConfig, onecycle_lr
from .params import params_bytes
from .synth import augment
from .targets import make_targets


@dataclass
class Sample:
    """One training item: an image for toy encoders, or a precomputed pyramid."""

    gt: InstanceLabelMap
    image: np.ndarray | None = None          # (3, H, W) float32
    pyramid: FeaturePyramid | None = None


class SegModel:
    """Frozen-encoder segmentation model: encoder (optional) + decoder/heads."""

    def __init__(self, encoder, decoder: DecoderHeads):
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def build(cls, enc_spec: EncoderSpec, n_cell_types: int, seed: int = 0,
              dump_channels: int | None = None) -> "SegModel":
        cfg = DecoderConfig(n_cell_types=n_cell_types, input_size=enc_spec.input_size)
        if enc_spec.kind == "hierarchical":
            encoder = build_encoder(enc_spec, seed=seed)
            in_c = tuple(enc_spec.base_channels * 2 ** i for i in range(4))
        elif enc_spec.kind == "isotropic":
            encoder = build_encoder(enc_spec, seed=seed)
            in_c = (enc_spec.dim,) * 4
        else:
            if dump_channels is None:
                raise ConfigError("dump encoders need dump_channels")
            encoder = None
            in_c = (dump_channels,) * 4
        decoder = DecoderHeads(cfg, in_channels=in_c, seed=seed + 1)
        return cls(encoder, decoder)

    def trainable_params(self) -> dict[str, T.Tensor4]:
        return self.decoder.params

    def forward(self, sample_images: T.Tensor4 | None = None,
                pyramid: FeaturePyramid | None = None) -> HeadOutputs:
        if pyramid is None:
            if self.encoder is None:
                raise ConfigError("dump-mode model needs a pyramid input")
            pyramid = self.encoder.forward(sample_images)
        return self.decoder.forward(pyramid)


def batch_pyramids(pyramids: list[FeaturePyramid]) -> FeaturePyramid:
    """Stack same-shape single-sample pyramids along the batch axis."""
    base = pyramids[0]
    levels = []
    for li in range(4):
        data = np.concatenate([p.levels[li].tensor.data for p in pyramids], axis=0)
        levels.append(PyramidLevel(T.Tensor4(data), base.levels[li].level_index,
                                   base.levels[li].reduction, base.levels[li].source_block))
    return FeaturePyramid(levels, base.kind, input_size=base.input_size)


@contextmanager
def _inference_mode(params: dict[str, T.Tensor4]):
    """Disable grad tracking so validation forward passes skip graph capture."""
    flags = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in params.items():
            p.requires_grad = flags[k]


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    checkpoint_path: str
    curve_path: str
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)


def _forward_batch(model: SegModel, samples: list[Sample], n_types: int, dmax: int):
    images = []
    gts = []
    pyramids = []
    for s in samples:
        if s.image is not None:
            images.append(s.image)
            gts.append(s.gt)
        else:
            pyramids.append(s.pyramid)
            gts.append(s.gt)
    if images and pyramids:
        raise ConfigError("a batch cannot mix image and pyramid samples")
    targets = TargetBatch.from_bundles([make_targets(g, n_types, dmax=dmax) for g in gts])
    if images:
        x = T.Tensor4(np.stack(images).astype(np.float32))
        pred = model.forward(sample_images=x)
    else:
        pred = model.forward(pyramid=batch_pyramids(pyramids))
    return pred, targets


def fit(model: SegModel, train_set: list[Sample], val_set: list[Sample],
        loss_cfg: LossConfig, sched: ScheduleConfig, out_dir: str,
        n_types: int, batch_size: int = 8, seed: int = 0,
        use_augment: bool = True, dmax: int = 64,
        betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
        log=None) -> FitResult:
    """Train the decoder; the encoder must be flagged frozen beforehand.

    Saves a checkpoint whenever validation loss improves and emits
    ``loss_curve.csv`` with one ``epoch,train_loss,val_loss,lr`` row per epoch.
    """
    if not train_set:
        raise ConfigError("empty training set")
    if model.encoder is not None and not model.encoder.frozen:
        raise ConfigError("encoder must be frozen before fit()")
    if model.encoder is None and use_augment:
        raise ConfigError("augmentation needs images; disable it for dump-mode training")

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "best.fckp")
    curve_path = os.path.join(out_dir, "loss_curve.csv")

    encoder_before = params_bytes(model.encoder.params) if model.encoder else b""
    opt = AdamW(model.trainable_params(), betas=betas, eps=eps, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    best_val = math.inf
    best_epoch = -1
    curve: list[tuple[int, float, float, float]] = []
    global_step = 0
    lr = sched.peak_lr / sched.div_start

    for epoch in range(1, sched.total_epochs + 1):
        order = rng.permutation(len(train_set))
        train_loss_sum = 0.0
        seen = 0
        for start in range(0, len(order), batch_size):
            chunk = [train_set[i] for i in order[start:start + batch_size]]
            batch = []
            for j, s in enumerate(chunk):
                if use_augment and s.image is not None:
                    child = np.random.default_rng([seed, epoch, int(order[start + j])])
                    img, gt = augment(s.image, s.gt, seed=int(child.integers(2 ** 31)))
                    batch.append(Sample(gt=gt, image=img))
                else:
                    batch.append(s)
            pred, targets = _forward_batch(model, batch, n_types, dmax)
            total, breakdown = composite_loss(pred, targets, loss_cfg)
            opt.zero_grad()
            T.backward(total)
            lr = onecycle_lr(global_step, sched)
            opt.step(lr)
            global_step += 1
            train_loss_sum += breakdown["total"] * len(chunk)
            seen += len(chunk)
        train_loss = train_loss_sum / max(seen, 1)

        val_loss = evaluate_loss(model, val_set, loss_cfg, n_types, batch_size, dmax)
        curve.append((epoch, train_loss, val_loss, lr))
        if log:
            log(f"epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} lr {lr:.2e}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            model.decoder.save(ckpt_path)

    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for epoch, tr, vl, lr_row in curve:
            fh.write(f"{epoch},{tr:.8f},{vl:.8f},{lr_row:.10e}\n")

    if model.encoder is not None:
        assert params_bytes(model.encoder.params) == encoder_before, \
            "frozen encoder parameters changed during training"
    return FitResult(best_epoch=best_epoch, best_val_loss=best_val,
                     checkpoint_path=ckpt_path, curve_path=curve_path, curve=curve)


def evaluate_loss(model: SegModel, items: list[Sample], loss_cfg: LossConfig,
                  n_types: int, batch_size: int = 8, dmax: int = 64) -> float:
    """Mean composite loss over a dataset, without graph capture."""
    if not items:
        return 0.0
    total = 0.0
    with _inference_mode(model.trainable_params()):
        enc_params = model.encoder.params if model.encoder else {}
        with _inference_mode(enc_params):
            for start in range(0, len(items), batch_size):
                chunk = items[start:start + batch_size]
                pred, targets = _forward_batch(model, chunk, n_types, dmax)
                _, breakdown = composite_loss(pred, targets, loss_cfg)
                total += breakdown["total"] * len(chunk)
    return total / len(items)
