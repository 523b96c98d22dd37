"""Command-line surface binding the pipeline into reproducible runs.

Exit codes: 0 success, 2 config/usage, 3 missing input, 4 format error,
5 data error, 1 unexpected failure. Errors print one machine-parsable line
to stderr: ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import glob
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .config import RunConfig
from .dataio import (
    DatasetManifest,
    ManifestRecord,
    load_image,
    load_label_map,
    read_manifest,
    save_image,
    save_label_map,
    write_manifest,
)
from .encoders import read_feature_dump, select_blocks
from .errors import ConfigError, DataError
from .fmap import FmapFormatError
from .labelmap import InstanceLabelMap
from .metrics import evaluate_dataset
from .optim import ScheduleConfig
from .postproc import postprocess
from .synth import SceneSpec, generate_scene, oversample, split_dataset
from .train import Sample, SegModel, fit

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_DATA = 5


# ---------------------------------------------------------------------------
# helpers

def _patch_name(i: int) -> str:
    return f"patch_{i:04d}"


def _class_pixel_counts(gt: InstanceLabelMap) -> dict[int, int]:
    areas = np.bincount(gt.labels.reshape(-1))
    counts: dict[int, int] = {}
    for i, t in gt.types.items():
        if i < len(areas):
            counts[t] = counts.get(t, 0) + int(areas[i])
    return counts


def _load_split(cfg: RunConfig, split: str):
    manifest_path = os.path.join(cfg.data_dir, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    manifest = read_manifest(manifest_path)
    samples = []
    for rec in manifest.by_split(split):
        img_path = os.path.join(cfg.data_dir, rec.image_path)
        lab_path = os.path.join(cfg.data_dir, rec.label_path)
        gt = load_label_map(lab_path)
        if cfg.encoder_kind == "dump":
            stem = os.path.splitext(os.path.basename(rec.image_path))[0]
            fmap_path = os.path.join(cfg.data_dir, "fmaps", f"{stem}.fmap")
            if not os.path.exists(fmap_path):
                raise FileNotFoundError(fmap_path)
            samples.append(Sample(gt=gt, pyramid=read_feature_dump(fmap_path)))
        else:
            image = load_image(img_path)
            if image.shape[1] != cfg.input_size:
                raise ConfigError(
                    f"{img_path}: size {image.shape[1]} != configured input_size {cfg.input_size}")
            samples.append(Sample(gt=gt, image=image))
    return samples


def _build_model(cfg: RunConfig, dump_channels: int | None = None) -> SegModel:
    model = SegModel.build(cfg.encoder_spec(), n_cell_types=cfg.n_cell_types,
                           seed=cfg.seed, dump_channels=dump_channels)
    if model.encoder is not None:
        model.encoder.freeze()
    return model


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synth(args) -> int:
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "labels"), exist_ok=True)
    tags = split_dataset(args.count, seed=args.seed)
    records = []
    for i in range(args.count):
        spec = SceneSpec(size=args.size,
                         instance_count=(args.min_count, args.max_count),
                         radius_range=(args.min_radius, args.max_radius),
                         n_types=args.n_types, touch_probability=args.touch_prob,
                         noise_level=args.noise, seed=args.seed * 1_000_003 + i)
        image, gt = generate_scene(spec)
        name = _patch_name(i)
        img_rel = os.path.join("images", f"{name}.png")
        lab_rel = os.path.join("labels", f"{name}.png")
        save_image(os.path.join(args.out, img_rel), image)
        save_label_map(os.path.join(args.out, lab_rel), gt)
        records.append(ManifestRecord(img_rel, lab_rel, tags[i]))
    write_manifest(os.path.join(args.out, "manifest.tsv"), DatasetManifest(records))
    print(f"wrote {args.count} patches to {args.out}")
    return EXIT_OK


def cmd_select_blocks(args) -> int:
    print(" ".join(str(b) for b in select_blocks(args.n, args.strategy)))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.out:
        cfg.out_dir = args.out
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    if cfg.oversample and cfg.encoder_kind != "dump":
        counts = [_class_pixel_counts(s.gt) for s in train_set]
        train_set = oversample(train_set, counts, cfg.n_cell_types, seed=cfg.seed)
    dump_channels = None
    if cfg.encoder_kind == "dump":
        if not train_set or train_set[0].pyramid is None:
            raise DataError("dump-mode training needs fmap files")
        dump_channels = train_set[0].pyramid.levels[0].tensor.shape[1]
    model = _build_model(cfg, dump_channels=dump_channels)
    steps = max(1, math.ceil(len(train_set) / cfg.batch_size))
    sched = ScheduleConfig(peak_lr=cfg.lr_peak, final_lr=cfg.lr_final, pct_up=cfg.pct_up,
                           total_epochs=cfg.epochs, steps_per_epoch=steps,
                           div_start=cfg.div_start)
    result = fit(model, train_set, val_set, cfg.loss_config(), sched, cfg.out_dir,
                 n_types=cfg.n_cell_types, batch_size=cfg.batch_size, seed=cfg.seed,
                 use_augment=cfg.augment and cfg.encoder_kind != "dump", dmax=cfg.dmax,
                 betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                 weight_decay=cfg.weight_decay,
                 log=lambda msg: print(msg, file=sys.stderr))
    print(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f}")
    print(f"checkpoint {result.checkpoint_path}")
    print(f"loss curve {result.curve_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if not os.path.isdir(args.input):
        raise FileNotFoundError(args.input)
    fmap_files = sorted(glob.glob(os.path.join(args.input, "*.fmap")))
    image_files = sorted(glob.glob(os.path.join(args.input, "*.png")))
    os.makedirs(args.out, exist_ok=True)
    if fmap_files:
        first = read_feature_dump(fmap_files[0])
        model = _build_model(cfg, dump_channels=first.levels[0].tensor.shape[1])
    elif image_files:
        model = _build_model(cfg)
    else:
        raise FileNotFoundError(f"no .fmap or .png inputs in {args.input}")
    model.decoder.load(args.checkpoint)

    def run_one(path: str):
        stem = os.path.splitext(os.path.basename(path))[0]
        if path.endswith(".fmap"):
            pred = model.forward(pyramid=read_feature_dump(path))
        else:
            image = load_image(path)
            pred = model.forward(sample_images=T.Tensor4(image[None]))
        sm1 = _softmax_np(pred.sm1_logits.data[0], axis=0).astype(np.float32)
        sm2 = _softmax_np(pred.sm2_logits.data[0], axis=0).astype(np.float32)
        dm = pred.dm.data[0].astype(np.float32)
        np.savez(os.path.join(args.out, f"{stem}.maps.npz"), sm1=sm1, sm2=sm2, dm=dm)

    for path in fmap_files or image_files:
        run_one(path)
    print(f"wrote {len(fmap_files or image_files)} map files to {args.out}")
    return EXIT_OK


def cmd_postproc(args) -> int:
    files = sorted(glob.glob(os.path.join(args.maps, "*.maps.npz")))
    if not files:
        raise FileNotFoundError(f"no .maps.npz files in {args.maps}")
    os.makedirs(args.out, exist_ok=True)
    from .postproc import PostprocParams
    params = PostprocParams(min_seed_area=args.min_seed_area, r_max=args.r_max,
                            dmax=args.dmax)

    def run_one(path: str):
        with np.load(path) as data:
            label_map = postprocess(data["sm1"], data["sm2"], data["dm"], params)
        stem = os.path.basename(path).replace(".maps.npz", "")
        save_label_map(os.path.join(args.out, f"{stem}.png"), label_map)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(run_one, files))
    else:
        for path in files:
            run_one(path)
    print(f"wrote {len(files)} label maps to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_files = sorted(glob.glob(os.path.join(args.gt, "*.png")))
    if not gt_files:
        raise FileNotFoundError(f"no label maps in {args.gt}")

    def load_pair(path):
        name = os.path.basename(path)
        pred_path = os.path.join(args.pred, name)
        if not os.path.exists(pred_path):
            raise FileNotFoundError(pred_path)
        return os.path.splitext(name)[0], load_label_map(path), load_label_map(pred_path)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            named = list(pool.map(load_pair, gt_files))
    else:
        named = [load_pair(p) for p in gt_files]
    report = evaluate_dataset(named, n_types=args.n_types)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    sidecar = f"{os.path.splitext(args.out)[0]}.perclass.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"per_class_pq": {str(k): v for k, v in report.per_class_pq.items()},
                   "mpq_plus": report.mpq_plus}, fh, indent=1, sort_keys=True)
    print(report.summary_table())
    return EXIT_OK


def cmd_report(args) -> int:
    header = f"{'file':<28} {'P':>8} {'R':>8} {'DQ':>8} {'SQ':>8} {'PQ':>8} {'mPQ+':>8}"
    print(header)
    for path in args.csv:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        rows = []
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().strip()
            if head != "image_id,P,R,DQ,SQ,PQ":
                raise DataError(f"{path}: unexpected metrics CSV header {head!r}")
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) == 6:
                    rows.append([float(v) for v in parts[1:]])
        sidecar = f"{os.path.splitext(path)[0]}.perclass.json"
        mpq = "-"
        if os.path.exists(sidecar):
            with open(sidecar, encoding="utf-8") as fh:
                mpq = f"{100.0 * json.load(fh)['mpq_plus']:8.2f}"
        means = np.mean(rows, axis=0) if rows else np.zeros(5)
        cells = " ".join(f"{100.0 * v:8.2f}" for v in means)
        print(f"{os.path.basename(path):<28} {cells} {mpq:>8}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cellfuse",
                                     description="cell instance segmentation pipeline",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=100, help="number of patches")
    p.add_argument("--size", type=int, default=256, help="patch side length")
    p.add_argument("--n-types", type=int, default=3, help="number of cell types")
    p.add_argument("--min-count", type=int, default=8, help="min instances per patch")
    p.add_argument("--max-count", type=int, default=16, help="max instances per patch")
    p.add_argument("--min-radius", type=float, default=4.0, help="min ellipse radius")
    p.add_argument("--max-radius", type=float, default=12.0, help="max ellipse radius")
    p.add_argument("--touch-prob", type=float, default=0.2, help="touching-instance probability")
    p.add_argument("--noise", type=float, default=0.03, help="gaussian noise sigma")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("select-blocks", help="print skip-connection block indices",
                       formatter_class=fmt)
    p.add_argument("--n", type=int, required=True, help="encoder block count")
    p.add_argument("--strategy", choices=("shallow", "deep", "mixed"), required=True,
                   help="block selection strategy")
    p.set_defaults(func=cmd_select_blocks)

    p = sub.add_parser("train", help="train the decoder on a dataset", formatter_class=fmt)
    p.add_argument("--config", required=True, help="key=value run config file")
    p.add_argument("--out", default="", help="override out_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict maps for images or feature dumps",
                       formatter_class=fmt)
    p.add_argument("--config", required=True, help="key=value run config file")
    p.add_argument("--checkpoint", required=True, help="decoder checkpoint path")
    p.add_argument("--input", required=True, help="directory of .png images or .fmap dumps")
    p.add_argument("--out", required=True, help="output directory for .maps.npz files")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("postproc", help="turn predicted maps into label maps",
                       formatter_class=fmt)
    p.add_argument("--maps", required=True, help="directory of .maps.npz files")
    p.add_argument("--out", required=True, help="output directory for label PNGs")
    p.add_argument("--min-seed-area", type=int, default=10, help="minimum seed area in px")
    p.add_argument("--r-max", type=float, default=32.0, help="max center-to-seed distance")
    p.add_argument("--dmax", type=int, default=64, help="distance-map scale in px")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_postproc)

    p = sub.add_parser("eval", help="score predicted label maps against ground truth",
                       formatter_class=fmt)
    p.add_argument("--gt", required=True, help="ground-truth label map directory")
    p.add_argument("--pred", required=True, help="predicted label map directory")
    p.add_argument("--out", required=True, help="per-image metrics CSV path")
    p.add_argument("--n-types", type=int, default=3, help="number of cell types")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="summarize metrics CSVs as a percentage table",
                       formatter_class=fmt)
    p.add_argument("csv", nargs="+", help="metrics CSV files from eval")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"error: missing: {err}", file=sys.stderr)
        return EXIT_MISSING
    except FmapFormatError as err:
        print(f"error: format: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except DataError as err:
        print(f"error: data: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # pragma: no cover - last resort
        print(f"error: unexpected: {err}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
