"""Command-line entry point: a2pvis run / a2pvis resume."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import EXIT_CONFIG, PipelineError, resume_pipeline, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="a2pvis",
        description="Turn a tabular dataset into a quality-gated Markdown visualization report.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline on a dataset")
    run.add_argument("--data", required=True, help="input CSV file (header required)")
    run.add_argument("--out", required=True, help="run directory to create/populate")
    run.add_argument("--config", help="TOML config file")
    run.add_argument("--backend", choices=["live", "replay"])
    run.add_argument("--transcript", help="replay transcript (jsonl) for --backend replay")
    run.add_argument("--seed", type=int)
    run.add_argument("--date", help="ISO date injected into the report for determinism")
    run.add_argument("--max-attempts", type=int, dest="max_attempts")
    run.add_argument("--directions", type=int)
    run.add_argument("--executor", choices=["fake", "runner"])

    resume = sub.add_parser("resume", help="continue a persisted run from a stage boundary")
    resume.add_argument("--run", required=True, dest="run_dir", help="existing run directory")
    resume.add_argument(
        "--from",
        required=True,
        dest="from_stage",
        help="stage to restart at (sniff, visualize, insight, present, build)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            overrides = {
                "backend": args.backend,
                "transcript_path": args.transcript,
                "seed": args.seed,
                "date": args.date,
                "max_attempts": args.max_attempts,
                "directions": args.directions,
                "executor": args.executor,
            }
            cfg = load_config(args.config, overrides)
            return run_pipeline(cfg, args.data, args.out)
        return resume_pipeline(args.run_dir, args.from_stage)
    except (ConfigError, PipelineError) as exc:
        logging.getLogger("a2pvis").error("%s", exc)
        return getattr(exc, "exit_code", EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
