"""Command-line entry point: encode a manifest into a cache file."""

from __future__ import annotations

import argparse
import sys

from .encoders import CLIP_BACKBONES, ToyColorEncoder
from .export import ExportError, ExportJob, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="clip-export",
        description="Encode images or prompt texts into a binary embedding cache.")
    parser.add_argument("--backbone", default=ToyColorEncoder.name,
                        help=f"one of {(ToyColorEncoder.name,) + CLIP_BACKBONES}")
    parser.add_argument("--manifest", required=True,
                        help="image CSV (path,class_id) or prompt JSONL")
    parser.add_argument("--kind", required=True, choices=("image", "prompt"))
    parser.add_argument("--out", required=True)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args(argv)
    try:
        result = export(ExportJob(backbone=args.backbone, manifest_path=args.manifest,
                                  out_path=args.out, kind=args.kind,
                                  batch_size=args.batch))
    except (ExportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.count} records (dim {result.dim}, "
          f"{result.skipped} skipped) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
