"""``hlab <experiment> --config path.json [--out dir] [--override key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiments as ex

log = logging.getLogger("hlab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hlab", description="Run a configured Helmholtz experiment.")
    p.add_argument("experiment", choices=ex.EXPERIMENTS)
    p.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    p.add_argument("--out", help="output directory (default: config 'out' or ./hlab-<experiment>)")
    p.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="override a config field; dotted keys reach nested fields, values parse as JSON",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    raw = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ex.ConfigError(f"cannot read config: {exc}") from None
            if not isinstance(raw, dict):
                raise ex.ConfigError("config must be a JSON object")
        raw["experiment"] = args.experiment
        cfg = ex.ExperimentConfig.from_dict(ex.apply_overrides(raw, args.override))
        out = args.out or cfg["out"] or f"hlab-{args.experiment}"
        log.info("running %s -> %s", args.experiment, out)
        ex.run(cfg, out)
    except Exception as exc:  # mapped to the documented exit codes
        code = ex.exit_code_for(exc)
        if code == 1:
            raise
        print(f"hlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    print(out)
    return ex.EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
