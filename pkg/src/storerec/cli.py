"""Command-line entry point: ``storerec <stage> [options]``.

Every config key is also a flag (``--beam-width 20``, ``--no-alignment``).
Exit codes: 0 success, 2 validation error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import STAGES, PRESETS, field_types, load_config
from .errors import DivergenceError, StoreError, ValidationError
from .numeric import NumericError
from .pipeline import StageError, run_all, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3


def _add_config_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("config overrides")
    for key, kind in field_types().items():
        if key == "seed":
            continue
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            group.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None)
        elif key == "mask_direction":
            group.add_argument(flag, dest=key, choices=("bottleneck", "paper-literal"), default=None)
        else:
            group.add_argument(flag, dest=key, type=kind, default=None, metavar=kind.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--workdir", default="work", help="artifact directory (default: ./work)")
    common.add_argument("--force", action="store_true", help="ignore upstream config-hash mismatches / rerun everything")
    common.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(common)

    parser = argparse.ArgumentParser(prog="storerec", description="dense-tokenizer generative recommendation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES + ("run-all",):
        sub.add_parser(stage, parents=[common], help=f"run {stage}" if stage != "run-all" else "run every stale stage")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in field_types() if getattr(args, k, None) is not None}
    try:
        cfg = load_config(args.preset, args.config, overrides)
        if args.command == "run-all":
            run_all(cfg, args.workdir, force=args.force)
        else:
            run_stage(args.command, cfg, args.workdir, force=args.force)
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return _code(exc.cause)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code(exc)
    return EXIT_OK


def _code(exc: BaseException) -> int:
    if isinstance(exc, DivergenceError) or (isinstance(exc, NumericError) and not isinstance(exc, ValidationError)):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ValidationError, FileNotFoundError, KeyError)):
        return EXIT_VALIDATION
    return 1


if __name__ == "__main__":
    sys.exit(main())
