"""Command-line entry point: extract features from pretrained checkpoints."""

from __future__ import annotations

import argparse
import sys

from .runner import POOLINGS, ExtractionJob, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aft-extract",
        description=(
            "Run pretrained transformer checkpoints over a JSONL text dataset and "
            "write feature/label/manifest files for downstream training."
        ),
    )
    parser.add_argument(
        "--model",
        action="append",
        required=True,
        dest="models",
        help="model path or hub id; repeat to extract from several models",
    )
    parser.add_argument("--dataset", required=True, help="JSONL file with label plus text/fields")
    parser.add_argument("--pooling", default="cls-token", choices=POOLINGS)
    parser.add_argument("--task", help="apply a named prompt template to each example")
    parser.add_argument("--batch-size", type=int, default=16, dest="batch_size")
    parser.add_argument("--max-length", type=int, default=128, dest="max_length")
    parser.add_argument("--split-seed", type=int, default=0, dest="split_seed")
    parser.add_argument("--test-fraction", type=float, default=0.25, dest="test_fraction")
    parser.add_argument(
        "--inputs-model",
        type=int,
        default=0,
        dest="inputs_model",
        help="index of the model whose features stand in for the raw inputs",
    )
    parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExtractionJob(
        models=args.models,
        dataset=args.dataset,
        pooling=args.pooling,
        batch_size=args.batch_size,
        out_dir=args.out,
        task=args.task,
        max_length=args.max_length,
        split_seed=args.split_seed,
        test_fraction=args.test_fraction,
        inputs_model=args.inputs_model,
    )
    try:
        checksums = extract(job)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, digest in sorted(checksums.items()):
        print(f"sha256 {name} {digest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
