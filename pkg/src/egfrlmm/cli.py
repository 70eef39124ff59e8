"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 transport error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter

from egfrlmm.cohort import read_audit
from egfrlmm.config import SEED_KEYS, load_config, with_overrides
from egfrlmm.errors import TransportError, ValidationError
from egfrlmm.pipeline import STAGES, Pipeline

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRANSPORT = 2
EXIT_INTERNAL = 3


def _seed(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    if not sep or name not in SEED_KEYS:
        raise argparse.ArgumentTypeError(f"expected NAME=INT with NAME in {SEED_KEYS}, got {text!r}")
    try:
        return name, int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed {name} must be an integer, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egfrlmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run pipeline stages")
    run.add_argument("--config", required=True)
    which = run.add_mutually_exclusive_group(required=True)
    which.add_argument("--stage", choices=STAGES, action="append", help="stage to run (repeatable)")
    which.add_argument("--all", action="store_true", help="run every stage, skipping up-to-date ones")
    run.add_argument("--offline", action="store_true", help="mocks and cache replay only; no network")
    run.add_argument("--run-id", help="override run_id from the config")
    run.add_argument("--seed", type=_seed, action="append", default=[], metavar="NAME=INT",
                     help=f"override a seed ({', '.join(SEED_KEYS)}); repeatable")
    run.add_argument("--force", action="store_true", help="rerun stages even when up to date")

    val = sub.add_parser("validate-config", help="check a config file and print a summary")
    val.add_argument("--config", required=True)

    audit = sub.add_parser("show-audit", help="print the preprocessing audit of a run")
    audit.add_argument("--config", required=True)
    audit.add_argument("--run-id")
    audit.add_argument("--rows", action="store_true", help="list every audit row, not just counts")
    return parser


def _load(args):
    config = load_config(args.config)
    seeds = dict(getattr(args, "seed", []) or [])
    if seeds or getattr(args, "run_id", None):
        config = with_overrides(config, seeds=seeds, run_id=args.run_id)
    return config


def cmd_run(args) -> int:
    config = _load(args)
    stages = list(STAGES) if args.all else args.stage
    result = Pipeline(config, offline=args.offline).run(stages, force=args.force)
    for stage in STAGES:
        if stage in result.executed:
            print(f"{stage}: ran")
        elif stage in result.skipped:
            print(f"{stage}: up to date")
    print(f"run directory: {config.run_dir}")
    if result.transport_errors:
        print(f"{result.transport_errors} request(s) failed after retries", file=sys.stderr)
    return result.exit_code


def cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"config ok: {args.config}")
    print(f"  cohort: {config.cohort.kind}")
    print(f"  backends: {', '.join(b.backend_id + ' (' + b.model_name + ')' for b in config.backends)}")
    print(f"  templates: {', '.join(str(t) for t in config.templates)}; repeats: {config.repeats}")
    print(f"  seeds: {', '.join(f'{k}={v}' for k, v in sorted(config.seeds.items()))}")
    print(f"  run directory: {config.run_dir}")
    return EXIT_OK


def cmd_show_audit(args) -> int:
    config = _load(args)
    path = config.run_dir / "ingest" / "audit.csv"
    if not path.exists():
        raise ValidationError(f"no audit at {path}; run the ingest stage first")
    rows = read_audit(path)
    counts = Counter((r.entity, r.reason) for r in rows)
    print(f"{len(rows)} audit row(s) in {path}")
    for (entity, reason), n in sorted(counts.items()):
        print(f"  {entity:8s} {reason:18s} {n}")
    if args.rows:
        for r in rows:
            print(f"{r.entity},{r.id},{r.reason}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate-config": cmd_validate, "show-audit": cmd_show_audit}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which would read as a transport failure
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping onto the internal exit code
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
