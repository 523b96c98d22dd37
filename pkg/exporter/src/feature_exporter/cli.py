"""Command-line entry mirroring the export job fields."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmap-export",
        description="export encoder block features to FMAP files",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--model", required=True, help="timm hub model name")
    parser.add_argument("--blocks", required=True,
                        help="four comma-separated 0-based block indices, e.g. 2,4,6,8")
    parser.add_argument("--input", required=True, help="directory of .png patches")
    parser.add_argument("--out", required=True, help="output directory for .fmap files")
    parser.add_argument("--resolution", type=int, required=True,
                        help="model input side length, e.g. 224")
    parser.add_argument("--mean", default="0.485,0.456,0.406",
                        help="normalization mean, comma-separated RGB")
    parser.add_argument("--std", default="0.229,0.224,0.225",
                        help="normalization std, comma-separated RGB")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        blocks = tuple(int(b) for b in args.blocks.split(","))
        job = ExportJob(model_id=args.model, block_indices=blocks,
                        input_dir=args.input, output_dir=args.out,
                        resolution=args.resolution,
                        mean=tuple(float(v) for v in args.mean.split(",")),
                        std=tuple(float(v) for v in args.std.split(",")))
        written = export_features(job)
    except ExportError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"wrote {len(written)} FMAP files to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
