"""Command-line entry point: ``lowrank-nas <stage> [--out DIR] [--config FILE] [--seed N] [--key value ...]``.

Any config key can be overridden as ``--section.field value`` (see ``lowrank-nas keys``).
The resolved configuration is stored in ``<out>/config.txt`` and picked up by
later stages, so overrides given to an early stage stay in effect.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import KEYS, describe_keys, load_config, parse_text
from .errors import ConfigError, LowRankNASError

CONFIG_FILE = "config.txt"
ALIASES = {"sampling": "supernet.sampling"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowrank-nas", description=__doc__.splitlines()[0],
                                epilog="config keys:\n" + describe_keys(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="stage", required=True)
    for name in [*pipeline.STAGES, "eval", "export", "all"]:
        sp = sub.add_parser(name)
        sp.add_argument("--out", default="run", help="artifact directory (default: ./run)")
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        if name in ("eval", "export"):
            sp.add_argument("--rank-config", default="full",
                            help="full | max | uniform:R | best | comma-separated ranks (default: full)")
        if name == "export":
            sp.add_argument("--name", default=pipeline.EXPORT, help="output file name inside --out")
        if name == "train-supernet":
            sp.add_argument("--sampling", choices=("lowrank", "uniform"))
    sub.add_parser("keys", help="list config keys")
    return p


def _overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}", key=key)
            value = extra[i + 1]
            i += 1
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        out[key] = value
        i += 1
    return out


def resolve(args, extra: list[str]):
    """Stored run config, then ``--config``, then flags."""
    out = Path(args.out)
    values: dict[str, object] = {}
    stored = out / CONFIG_FILE
    if stored.exists():
        values.update(parse_text(stored.read_text(encoding="utf-8")))
    if args.config:
        try:
            values.update(parse_text(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc.strerror}") from None
    values.update(_overrides(extra))
    if args.seed is not None:
        values["seed"] = args.seed
    for flag, key in ALIASES.items():
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    return load_config(None, values)


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    if args.stage == "keys":
        print(describe_keys())
        return 0
    try:
        cfg = resolve(args, extra)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
        if args.stage == "all":
            lines = pipeline.run_all(cfg, out)
        elif args.stage == "eval":
            lines = [pipeline.run_eval(cfg, out, args.rank_config)]
        elif args.stage == "export":
            lines = [pipeline.export(cfg, out, args.rank_config, args.name)]
        else:
            lines = [pipeline.STAGES[args.stage](cfg, out)]
    except LowRankNASError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
