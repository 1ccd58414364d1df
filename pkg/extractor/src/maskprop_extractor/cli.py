"""Command line for the extractor: ``extract`` and ``export-fixture``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .pooling import ExtractionJob, GswSettings
from .runner import export_kernel_fixture, run_extraction


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mask-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="export a mask-embedding bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--masks-dir", dest="masks_dir", required=True,
                   help="directory of per-image mask PNG folders")
    p.add_argument("--text", required=True, help="K x d float32 text embeddings")
    p.add_argument("--classes", required=True, help="one class name per line")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=None,
                   help="defaults to the checkpoint's input size")
    p.add_argument("--stride", type=int, default=None, help="defaults to window / 2")
    p.add_argument("--short-side", dest="short_side", type=int, default=None,
                   help="canvas short side for sliding windows; defaults to 2 x window")
    p.add_argument("--temperature", type=float, default=100.0)
    p.add_argument("--has-background", dest="has_background", action="store_true")

    f = sub.add_parser("export-fixture", help="export one image's last-layer tensors")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--image", required=True)
    f.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            from .model import load_checkpoint

            window = args.window or load_checkpoint(args.checkpoint).config.image_size
            job = ExtractionJob(
                images=[Path(p) for p in args.images],
                masks_dir=Path(args.masks_dir),
                checkpoint=Path(args.checkpoint),
                out=Path(args.out),
                text_file=Path(args.text),
                classes_file=Path(args.classes),
                temperature=args.temperature,
                has_background=args.has_background,
                gsw=GswSettings(
                    window=window,
                    stride=args.stride or window // 2,
                    short_side=args.short_side or 2 * window,
                ),
            )
            out = run_extraction(job)
            print(f"bundle written to {out}")
        else:
            out = export_kernel_fixture(Path(args.checkpoint), Path(args.image), Path(args.out))
            print(f"fixture written to {out}")
        return 0
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
