"""``amortize <command> --config <path> --out <dir> --seed <u64>``"""
from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .experiments import COMMANDS
from .mathcore import ConfigError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amortize", description="Inference-strategy experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master seed (unsigned 64-bit)")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "kind": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2 ** 64:
        return _fail("ConfigError", "seed must be an unsigned 64-bit integer", 2)
    try:
        cfg = load_config(args.config)
        written = COMMANDS[args.command](cfg, args.out, args.seed)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), 2)
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
