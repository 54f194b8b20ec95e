"""Command-line entry point: image folders -> bag dataset."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import LAYOUTS, ExtractorConfig
from .extract import LayoutError, extract, extract_masks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mibag-extract", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mibag-extract {__version__}")
    parser.add_argument("--root", required=True, help="dataset root directory")
    parser.add_argument("--category", default="", help="category subfolder (mvtec)")
    parser.add_argument("--layout", choices=LAYOUTS, default="mvtec")
    parser.add_argument("--out", required=True, help="output directory for bags + manifest")
    parser.add_argument("--image-size", dest="image_size", type=int, default=256)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    parser.add_argument("--weights", default=None, help="local backbone state-dict (.pth)")
    parser.add_argument("--no-pretrained", dest="pretrained", action="store_false",
                        help="seeded random backbone init (offline testing)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--masks", dest="masks", action="store_true",
                        help="also emit PGM masks from ground_truth (mvtec)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExtractorConfig(
        dataset_root=Path(args.root),
        layout=args.layout,
        category=args.category,
        image_size=args.image_size,
        batch_size=args.batch_size,
        pretrained=args.pretrained,
        weights_path=Path(args.weights) if args.weights else None,
        seed=args.seed,
        device=args.device,
    )
    try:
        manifest = extract(cfg, Path(args.out))
        if args.masks:
            extract_masks(cfg, Path(args.out) / "masks")
    except (LayoutError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
