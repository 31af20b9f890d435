"""``qzdlab`` command line.

Exit status: 0 success, 1 unexpected failure, 2 invalid configuration or
arguments, 3 numerical abort. Errors are also printed to stderr as one JSON
object so that callers can parse them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .dynamics import NumericalAbort

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

logger = logging.getLogger("qzdlab")


class _ColorFormatter(logging.Formatter):
    COLORS = {logging.WARNING: "\033[33m", logging.ERROR: "\033[31m", logging.DEBUG: "\033[2m"}

    def format(self, record):
        msg = super().format(record)
        color = self.COLORS.get(record.levelno)
        return f"{color}{msg}\033[0m" if color else msg


def _setup_logging(verbosity: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    fmt = "%(levelname)s %(name)s: %(message)s"
    use_color = "NO_COLOR" not in os.environ and sys.stderr.isatty()
    handler.setFormatter(_ColorFormatter(fmt) if use_color else logging.Formatter(fmt))
    root = logging.getLogger("qzdlab")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING - 10 * min(verbosity, 2))


def _emit_error(report: dict) -> None:
    sys.stderr.write(json.dumps(report) + "\n")


def _load(args):
    from .pipeline import load_config

    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output_dir is not None:
        changes["output_dir"] = str(args.output_dir)
    if args.workers is not None:
        changes["workers"] = args.workers
    if changes:
        cfg = cfg.model_validate({**cfg.model_dump(), **changes})
    return cfg


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(json.dumps({"valid": True, "scenario": cfg.scenario.value, "seed": cfg.seed}))
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_scenario

    cfg = _load(args)
    t0 = time.perf_counter()
    manifest = run_scenario(cfg)
    logger.info("finished %s in %.2f s", manifest.scenario, time.perf_counter() - t0)
    print(json.dumps({"scenario": manifest.scenario, "output_dir": cfg.output_dir,
                      "outputs": [f["path"] for f in manifest.outputs]}))
    return EXIT_OK


def cmd_boundary_precompute(args) -> int:
    from .entanglement import boundary_curve

    ks = args.k or list(range(1, args.n + 1))
    for k in ks:
        if not 1 <= k <= args.n:
            raise ValueError(f"k must lie in 1..{args.n}, got {k}")
    cache = Path(args.cache_dir)
    for k in ks:
        boundary_curve(args.n, k, args.points, cache_dir=cache)
        logger.info("boundary N=%d k=%d cached", args.n, k)
    print(json.dumps({"cache_dir": str(cache), "atom_count": args.n, "k": ks,
                      "points": args.points}))
    return EXIT_OK


def cmd_schema(args) -> int:
    from .pipeline import config_schema

    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qzdlab", description="Zeno-dynamics simulation and analysis")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", type=Path, help="JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--output-dir", type=Path, help="override the configured output directory")
    common.add_argument("--workers", type=int, help="worker processes for sweeps and bootstrap")

    sub.add_parser("run", parents=[common], help="run a scenario").set_defaults(func=cmd_run)
    sub.add_parser("validate", parents=[common], help="check a configuration file").set_defaults(
        func=cmd_validate)
    sub.add_parser("schema", help="print the configuration JSON schema").set_defaults(func=cmd_schema)

    boundary = sub.add_parser("boundary", help="entanglement-depth boundary curves")
    bsub = boundary.add_subparsers(dest="boundary_command", required=True)
    pre = bsub.add_parser("precompute", help="compute and cache boundary curves")
    pre.add_argument("--n", type=int, required=True, help="atom number")
    pre.add_argument("--k", type=int, action="append", help="producibility size (repeatable; default all)")
    pre.add_argument("--points", type=int, default=201)
    pre.add_argument("--cache-dir", default="boundary_cache")
    pre.set_defaults(func=cmd_boundary_precompute)
    return p


def main(argv=None) -> int:
    from .pipeline import ConfigError

    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error(exc.report())
        return EXIT_CONFIG
    except NumericalAbort as exc:
        _emit_error({"error": "numerical_abort", "message": str(exc), "time": exc.time,
                     "step": exc.step})
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        _emit_error({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
