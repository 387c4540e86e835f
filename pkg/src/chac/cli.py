"""Command-line entry point.

Subcommands: run (all configured stages), simulate, linearize, measure,
invert, report, validate-potential. Every command takes --config; stage
commands accept --out and --jobs overrides. Exit codes: 0 success, 1 user
error (bad config, missing files), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .pipeline import STAGES, ConfigError, Pipeline, StageError, load_config, validate_potential_file

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chac",
        description="Spectral solver and coefficient-recovery pipeline for a "
        "coupled conserved/non-conserved phase-field system.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--out", help="output root (overrides config)")
        p.add_argument("--jobs", type=int, help="parallel solve cap (or env CHAC_JOBS)")
        if name == "run":
            p.add_argument(
                "--stages",
                help="comma-separated subset of: " + ", ".join(STAGES),
            )
        return p

    add_stage_command("run", "execute the configured stage list")
    add_stage_command("simulate", "nonlinear forward solves and snapshot export")
    add_stage_command("linearize", "derivative-field cascade export")
    add_stage_command("measure", "synthetic measurement bundles (finer data step)")
    add_stage_command("invert", "coefficient recovery from measurement bundles")
    add_stage_command("report", "human-readable summary and plot tables")

    vp = sub.add_parser("validate-potential", help="check a potential manifest for admissibility")
    vp.add_argument("--config", required=True, help="potential manifest (JSON)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-potential":
            report = validate_potential_file(args.config)
            json.dump(report, sys.stdout, indent=2, sort_keys=True)
            print()
            return EXIT_OK if report["structural_ok"] else EXIT_USER

        config = load_config(args.config)
        pipe = Pipeline(config, out=args.out, jobs=args.jobs)
        if args.command == "run":
            stages = args.stages.split(",") if getattr(args, "stages", None) else None
            pipe.run(stages)
        else:
            pipe.run([args.command])
        return EXIT_OK
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # internal fault: report, do not traceback-spam
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
