"""Command line: ``run``, ``compare`` and ``validate``.

Exit codes: 0 success (including an NA baseline), 1 configuration error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MODES, ConfigError, load_config
from .reporting import SchemaError, compare, compare_csv, format_table

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _run(args) -> int:
    from .runner import execute, write_outputs

    try:
        cfg = load_config(args.config, seed=args.seed, mode=args.mode, out=args.out)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res, _, _ = execute(cfg)
        summary = write_outputs(cfg, res, cfg.out)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if summary["na"]:
        print(f"{cfg.mode}: NA ({'; '.join(res.notes)}) -> {cfg.out}")
    else:
        print(
            f"{cfg.mode}: accuracy {summary['final_accuracy']:.4f}, "
            f"peak {summary['peak_memory_bytes']} B, "
            f"participation {summary['participation_rate']:.2f}, "
            f"{summary['rounds']} rounds -> {cfg.out}"
        )
    return EXIT_OK


def _compare(args) -> int:
    try:
        table = compare(args.files)
    except (OSError, SchemaError, ValueError) as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_table(table))
    if args.out:
        Path(args.out).write_text(compare_csv(table), encoding="utf-8")
    return EXIT_OK


def _validate(args) -> int:
    from .runner import validate

    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}")
        return EXIT_CONFIG
    report = validate(cfg)
    for severity, msg in report:
        print(f"{severity}: {msg}")
    return EXIT_CONFIG if any(s == "error" for s, _ in report) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="profl", description="Memory-constrained progressive FL simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--out")
    r.set_defaults(func=_run)

    c = sub.add_parser("compare", help="tabulate several metrics.csv files")
    c.add_argument("files", nargs="+")
    c.add_argument("--out", help="also write the table as CSV")
    c.set_defaults(func=_compare)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
