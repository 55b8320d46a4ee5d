"""Command line entry point: one subcommand per study kind."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .study import KINDS, OUTPUT_DIR_ENV, StudyConfig, run_study

# flag -> (config key, type, help); list flags take several values
_FLAGS = [
    ("--nu", "nu", int, "target order(s)", True),
    ("--n-list", "n", int, "refinement factors n", True),
    ("--n", "n", int, "alias of --n-list", True),
    ("--alpha", "alpha", int, "base weak order", False),
    ("--beta", "beta", int, "derivative count of the short-time estimate", False),
    ("--T", "T", float, "horizon", False),
    ("--level", "level", int, "expansion level (expand)", False),
    ("--max-depth", "max_depth", int, "tree depth limit, -1 for none (expand)", False),
    ("--generator", "generator", str, "generator row 'a,b,...', repeat per row", True),
    ("--scheme", "scheme", str, "ou | brownian | chain", False),
    ("--a", "a", float, "OU mean reversion rate", False),
    ("--sigma", "sigma", float, "OU volatility", False),
    ("--x0", "x0", float, "initial state", False),
    ("--function", "function", str, "x | x2 | cos | indicator:K | state:K", False),
    ("--samples", "samples", int, "Monte Carlo samples", False),
    ("--seed", "seed", int, "master seed", False),
    ("--workers", "workers", int, "thread count; results do not depend on it", False),
    ("--theta", "theta", float, "blur exponent", False),
    ("--grid", "grid", str, "density grid lo:hi:steps", False),
    ("--noise", "noise", str, "gaussian | uniform | rademacher", False),
    ("--z-star", "z_star", float, "lower-bound ball center", False),
    ("--r-star", "r_star", float, "lower-bound ball radius", False),
    ("--t", "t", float, "localization horizon", False),
    ("--steps", "steps", int, "step counts floor(t/delta) for localization checks", True),
    ("--psi-norm", "psi_norm", float, "plug a scheme norm instead of measuring it", False),
    ("--out", "out", str, f"CSV path (default ${OUTPUT_DIR_ENV}/<kind>.csv, else stdout)", False),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value config; its entries override flags")
    seen = set()
    for flag, key, typ, help_, many in _FLAGS:
        kw = dict(dest=key if flag != "--n" else "n_alias", type=typ, help=help_, default=None)
        if many:
            kw["nargs"] = "+"
        if key == "generator":
            kw.update(action="append", nargs=None)
        common.add_argument(flag, **kw)
        seen.add(key)
    parser = argparse.ArgumentParser(prog="tvboost", description="Boosted weak-order schemes: studies and checks.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        sub.add_parser(kind, parents=[common], help=f"run the {kind} study")
    return parser


def config_from_args(args: argparse.Namespace) -> StudyConfig:
    cfg = StudyConfig(kind=args.kind)
    values = vars(args)
    if values.get("n_alias") is not None and values.get("n") is None:
        values["n"] = values["n_alias"]
    for _, key, _, _, _ in _FLAGS:
        v = values.get(key)
        if v is not None:
            setattr(cfg, key, list(v) if isinstance(v, list) else v)
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = StudyConfig.parse(text, base=cfg)
        if cfg.kind != args.kind:
            raise ConfigError(f"config is for {cfg.kind!r}, subcommand is {args.kind!r}")
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status, text, message = run_study(cfg)
    if message:
        print(message, file=sys.stderr)
    if status == 0 and not (cfg.out or _env_dir()):
        sys.stdout.write(text)
    return status


def _env_dir():
    import os

    return os.environ.get(OUTPUT_DIR_ENV)


if __name__ == "__main__":
    sys.exit(main())
