"""Command-line entry point.

    wealthkin equilibrium --config run.ini --out results/eq
    wealthkin kinetic --inhomogeneous --override numerics.t_end=1
    wealthkin schema

Exit status: 0 on success, 2 for configuration errors, 3 for numerical aborts.
"""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional

from . import __version__
from .config import default_config, describe_schema, load_config
from .errors import ConfigError, NumericalAbort
from .harness import run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

SUBCOMMANDS = {
    "equilibrium": "equilibrium",
    "kinetic": "kinetic-homogeneous",
    "particles": "particles",
    "hydro": "hydro",
    "invariants": "invariants",
    "sweep": "epsilon-sweep",
    "compare": "micro-meso-compare",
}


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wealthkin", description="Kinetic wealth-exchange experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"run the {kind} experiment")
        sp.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
        sp.add_argument("--seed", type=_seed, help="random seed, overrides numerics.seed")
        sp.add_argument("--out", help="output directory, overrides output.dir")
        sp.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
        if name == "kinetic":
            sp.add_argument("--inhomogeneous", action="store_true",
                            help="solve the spatially inhomogeneous problem")
    sub.add_parser("schema", help="print every configuration key with its default")
    return ap


def _resolve(args):
    kind = SUBCOMMANDS[args.command]
    if getattr(args, "inhomogeneous", False):
        kind = "kinetic-inhomogeneous"
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"numerics.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    overrides.append(f"experiment.kind={kind}")
    if args.config:
        return load_config(args.config, overrides)
    return default_config(kind, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(describe_schema())
        return EXIT_OK
    try:
        config = _resolve(args)
        arts = run_experiment(config)
    except ConfigError as exc:
        where = f" in {args.config}" if getattr(args, "config", None) else ""
        print(f"wealthkin: config error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        state = getattr(exc, "state", None)
        extra = f" (state: {state})" if state else ""
        print(f"wealthkin: numerical abort [{type(exc).__name__}]: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"wrote {', '.join(sorted(arts.files))} to {arts.out_dir}")
    return arts.exit_status


if __name__ == "__main__":
    sys.exit(main())
