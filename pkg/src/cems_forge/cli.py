"""Command-line entry point.

Numerical libraries are imported only after ``--threads`` has been applied to
the BLAS environment variables, so the thread cap takes effect.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

SUBCOMMANDS = {
    "design-unstructured": ("design_unstructured",),
    "design-structured": ("design_structured",),
    "eval-map": ("snr_map",),
    "simulate-traffic": ("multilane_ecdf",),
    "connectivity": ("connectivity",),
    "sweep": ("se_vs_p", "codebook_sweep"),
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} is outside the unsigned 64-bit range")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cems-forge", description="Design and evaluate vehicular CEMS relays.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, kinds in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run a {' or '.join(kinds)} experiment")
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=_u64, help="override experiment.seed")
        p.add_argument("--out", help="override experiment.output_dir")
        p.add_argument("--trace", action="store_true", help="also write optimizer traces")
        p.add_argument("--threads", type=_positive, help="cap BLAS worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        if len(kinds) > 1:
            p.add_argument("--kind", choices=kinds, help="sweep to run (default: the config's kind)")
    return parser


def resolve_kind(command: str, config_kind: str, requested: str | None = None) -> str:
    """Experiment kind a subcommand runs, given the kind written in the config."""
    kinds = SUBCOMMANDS[command]
    if requested is not None:
        return requested
    return config_kind if config_kind in kinds else kinds[0]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError, load_config
    from .experiments import run_experiment

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    kind = resolve_kind(args.command, cfg.experiment.kind, getattr(args, "kind", None))
    cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, kind=kind))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.with_output(args.out)
    os.makedirs(cfg.experiment.output_dir, exist_ok=True)
    try:
        result = run_experiment(cfg, trace=args.trace)
    except KeyboardInterrupt:
        print("interrupted; partial output marked INCOMPLETE", file=sys.stderr)
        return 130
    except MemoryError as exc:
        print(f"out of memory budget: {exc}", file=sys.stderr)
        return 3
    for path in result.artifacts:
        print(path)
    for key, value in result.summary.items():
        if isinstance(value, (int, float)):
            print(f"{key} = {value:.6g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
