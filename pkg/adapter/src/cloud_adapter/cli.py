"""CLI: export model predictions for a directory of images.

Usage: cloud-export export --images <dir> --intrinsics <file> --out <dir>
       [--model <name>]

Images are named by nanosecond timestamps; the intrinsics file is JSON with
fx, fy, cx, cy, width, height. Exit codes: 0 ok, 2 usage error, 3 model
unavailable or prediction shape mismatch.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import discover_images, export_cloud, load_intrinsics
from .models import ModelUnavailable


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cloud-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write cloud files for a set of images")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--intrinsics", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--model", default="identity-stub")
    args = parser.parse_args(argv)

    try:
        intr = load_intrinsics(args.intrinsics)
        paths, timestamps = discover_images(args.images)
        manifest = export_cloud(paths, intr, args.out, model=args.model,
                                timestamps=timestamps)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ModelUnavailable as e:
        print(f"model unavailable: {e}", file=sys.stderr)
        return 3
    print(f"exported {len(manifest.frame_files)} frames to {manifest.cloud_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
