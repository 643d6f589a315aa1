"""Command line: ``jumpgrad run`` and ``jumpgrad validate``.

Exit status is 0 on success, 2 when validation checks fail and 1 on any
other error. Every config field can be overridden by a flag of the same
name in kebab case (``--n-samples``, ``--fd-h``, ...).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .harness import FIELDS, ConfigError, load_config, run_experiment

# short aliases kept for convenience
_ALIASES = {"master_seed": ["--seed"], "output_dir": ["--out"]}


def _list_of(conv):
    def parse(text):
        return [conv(v) for v in text.split(",") if v.strip()]

    return parse


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_TYPES = {
    "experiment": str,
    "theta": _list_of(float),
    "x0": _list_of(float),
    "horizon": float,
    "widths": _list_of(int),
    "n_grid": _list_of(int),
    "n_samples": int,
    "n_steps": int,
    "master_seed": int,
    "fd_h": float,
    "estimators": _list_of(str),
    "randomize_reward_integral": _bool,
    "output_dir": str,
    "workers": int,
    "batch_size": int,
    "timing_batches": int,
    "train_steps": int,
    "learning_rate": float,
}


def _add_fields(p: argparse.ArgumentParser, skip=()):
    for name in FIELDS:
        if name in skip:
            continue
        flags = ["--" + name.replace("_", "-")] + _ALIASES.get(name, [])
        p.add_argument(*flags, dest=name, type=_TYPES[name], default=None)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; status 2 is reserved for failed validation."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="jumpgrad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", parents=[common], help="run an experiment from a JSON config")
    run.add_argument("--config", default=None, help="JSON config file")
    _add_fields(run)
    val = sub.add_parser("validate", parents=[common], help="derivative checks and the oracle suite")
    _add_fields(val, skip=("experiment",))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {name: getattr(args, name, None) for name in FIELDS}
    if overrides["workers"] is None and os.environ.get("JUMPGRAD_WORKERS"):
        try:
            overrides["workers"] = int(os.environ["JUMPGRAD_WORKERS"])
        except ValueError:
            print("error: JUMPGRAD_WORKERS must be an integer", file=sys.stderr)
            return 1
    path = None
    if args.command == "validate":
        overrides["experiment"] = "validate"
    else:
        path = args.config
    try:
        cfg = load_config(path, overrides)
        return run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; rows written so far are on disk", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not re-raised: the exit status carries it
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
