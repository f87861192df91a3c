"""Command line for the embedding extractor sidecar."""

from __future__ import annotations

import argparse
import logging
import sys

from .embedding_file import EmbeddingFileError, scan_file
from .extract import ExtractorConfig, extract


def cmd_extract(args) -> int:
    with open(args.images, "r", encoding="utf-8") as fh:
        images = [line.strip() for line in fh if line.strip()]
    config = ExtractorConfig(
        model=args.model,
        images=images,
        output=args.out,
        stride=args.stride,
        layer=args.layer,
        num_heads=args.heads,
        max_side=args.max_side,
        manifest=args.manifest or args.out + ".manifest.txt",
    )
    report = extract(config)
    print(f"processed\t{report.count}")
    print(f"skipped\t{len(report.skipped)}")
    return 0


def cmd_verify(args) -> int:
    try:
        dim, records = scan_file(args.file)
    except EmbeddingFileError as exc:
        print(f"FAIL\t{exc}")
        return 1
    print(f"OK\tdim={dim}\trecords={len(records)}")
    for rec in records:
        print(
            f"image\t{rec['image_id']}\tgrid={rec['grid_h']}x{rec['grid_w']}\t"
            f"patch={rec['patch_size']}\tstride={rec['stride']}\t"
            f"norm=[{rec['norm_min']:.4g},{rec['norm_max']:.4g}]"
        )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bowlkit-extract",
        description="Dump ViT patch key features to BWLE embedding files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="images -> embedding file")
    p.add_argument("--images", required=True, help="text file, one image path per line")
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True,
                   help="checkpoint path or torch hub id (e.g. dino_vits16)")
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--layer", type=int, default=11)
    p.add_argument("--heads", type=int, default=6)
    p.add_argument("--max-side", type=int, default=None,
                   help="resize so the longer side is at most this (default: no resize)")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="validate an embedding file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, EmbeddingFileError) as exc:
        print(f"bowlkit-extract: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
