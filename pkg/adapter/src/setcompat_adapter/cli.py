"""CLI: images + raw manifest in, FRNF features + tokenized manifest out."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .extract import ExtractionJob, JobError, extract
from .textprep import tokenize_manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="setcompat-extract",
        description="Extract CNN features and tokenized descriptions for the engine.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--images", required=True, help="directory of <item_id>.<ext> images")
    parser.add_argument("--manifest", required=True, help="JSONL manifest with raw descriptions")
    parser.add_argument("--model", default="resnet18", help="torchvision model name")
    parser.add_argument(
        "--weights",
        default="default",
        choices=["default", "none"],
        help="'default' downloads pretrained weights; 'none' keeps a random backbone",
    )
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    if not os.path.isdir(args.images):
        print(f"setcompat-extract: error: image directory not found: {args.images}", file=sys.stderr)
        return 1
    if not os.path.isfile(args.manifest):
        print(f"setcompat-extract: error: manifest not found: {args.manifest}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    job = ExtractionJob(
        image_dir=args.images,
        manifest_path=args.manifest,
        out_path=os.path.join(args.out, "features.frnf"),
        model_name=args.model,
        weights="DEFAULT" if args.weights == "default" else None,
        batch_size=args.batch_size,
    )
    try:
        ids, dim = extract(job)
        n = tokenize_manifest(args.manifest, os.path.join(args.out, "manifest-tokenized.jsonl"))
    except (JobError, ValueError, OSError) as e:
        print(f"setcompat-extract: error: {e}", file=sys.stderr)
        return 1
    print(f"extracted {len(ids)} items (dim {dim}); tokenized {n} outfits")
    return 0


if __name__ == "__main__":
    sys.exit(main())
