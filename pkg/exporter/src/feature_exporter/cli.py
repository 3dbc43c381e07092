"""ssmp-export: frozen backbone features to the SSMP binary format."""

from __future__ import annotations

import argparse
import sys

from .backbones import BACKBONES
from .export import ExportSpec, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ssmp-export",
        description="Export CLS + patch tokens from a frozen vision backbone")
    parser.add_argument("--backbone", required=True, choices=BACKBONES)
    parser.add_argument("--images", required=True,
                        help="image folder (optionally one subfolder per class)")
    parser.add_argument("--out", required=True, help="output .ssmp file")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0,
                        help="weight seed for random-* backbones")
    args = parser.parse_args(argv)
    try:
        out = export(ExportSpec(args.backbone, args.images, args.out,
                                args.batch_size, args.device, args.seed))
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out} (+ {out}.meta.json)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
