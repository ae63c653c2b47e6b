"""Command-line entry point: train, evaluate, discover.

    openworld train    --config cfg.json
    openworld evaluate --config cfg.json --checkpoint out/checkpoint.owm
    openworld discover --config cfg.json --checkpoint out/checkpoint.owm \
                       [--mode rejected|ground-truth-unseen] [--rejected path]

The config is a JSON file (schema documented in the README).  The
OPENWORLD_OUTPUT_DIR environment variable overrides the configured output
directory.  Exit status 0 on success, 1 on any failure.
"""

from __future__ import annotations

import argparse
import sys

from .experiment import ExperimentConfig, run_discover, run_evaluate, run_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openworld",
        description="Open-world classification with unseen-class discovery",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the joint model")
    p_train.add_argument("--config", required=True)

    p_eval = sub.add_parser("evaluate", help="open classification + pair accuracy")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)

    p_disc = sub.add_parser("discover", help="cluster rejected or unseen examples")
    p_disc.add_argument("--config", required=True)
    p_disc.add_argument("--checkpoint", required=True)
    p_disc.add_argument("--mode", choices=["rejected", "ground-truth-unseen"],
                        default="rejected")
    p_disc.add_argument("--rejected", default=None,
                        help="rejected-set file (defaults to <output_dir>/rejected.txt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    phase = args.command
    try:
        cfg = ExperimentConfig.from_file(args.config)
        if phase == "train":
            manifest = run_train(cfg)
        elif phase == "evaluate":
            manifest = run_evaluate(cfg, args.checkpoint)
        else:
            manifest = run_discover(cfg, args.checkpoint, mode=args.mode,
                                    rejected_path=args.rejected)
    except Exception as exc:  # surface one-line diagnostics, not tracebacks
        print(f"openworld {phase}: error: {exc}", file=sys.stderr)
        return 1
    print(f"openworld {phase}: ok ({manifest})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
