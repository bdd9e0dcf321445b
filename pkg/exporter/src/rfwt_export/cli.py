"""rfwt-export command line: convert a checkpoint and emit its manifest."""

from __future__ import annotations

import argparse
import sys

from .exporter import UnsupportedArchitectureError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rfwt-export")
    sub = parser.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("export", help="convert a checkpoint to RFWT")
    p.add_argument("--source", required=True, help="model directory or identifier")
    p.add_argument("--out", required=True, help="RFWT output path")
    p.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    p.add_argument("--vocab-out", help="write the tokenizer vocabulary here")
    p.add_argument("--manifest-out", help="write the manifest here (default <out>.manifest)")
    args = parser.parse_args(argv)

    manifest_path = args.manifest_out or (args.out + ".manifest")
    try:
        manifest = export(args.source, args.out, dtype=args.dtype,
                          vocab_path=args.vocab_out, manifest_path=manifest_path)
    except UnsupportedArchitectureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    print(manifest.to_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
