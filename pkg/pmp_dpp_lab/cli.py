
from __future__ import annotations
import argparse
import sys
from typing import List, Optional

import yaml

from .config import PRESETS, ConfigError, load_config
from .report import VerificationReport
from .scenarios import list_scenarios

EXIT_CONFIG = 2


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.output is not None:
        out["output_root"] = args.output
    if args.jobs is not None:
        out["n_jobs"] = args.jobs
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def cmd_run(args) -> int:
    from .runner import run_experiment
    try:
        cfg = load_config(args.config, _overrides(args))
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_experiment(cfg)
    print(report.summary_text())
    return report.exit_code()


def cmd_list(args) -> int:
    print(list_scenarios())
    print("\npresets: " + ", ".join(sorted(PRESETS)))
    return 0


def cmd_report(args) -> int:
    report = VerificationReport.from_json(args.path)
    if args.csv:
        print(report.summary_frame().to_csv(index=False), end="")
    else:
        print(report.summary_text())
    return report.exit_code()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmp-dpp-lab",
                                     description="Maximum-principle and dynamic-programming checks on spectral truncations.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config or preset name")
    run.add_argument("config", help=f"YAML path or preset ({', '.join(sorted(PRESETS))})")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--output", default=None, help="output root (default $PMPDPP_OUTPUT_DIR or ./Outputs)")
    run.add_argument("--jobs", type=int, default=None, help="parallel checks")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (YAML value)")
    run.set_defaults(func=cmd_run)

    ls = sub.add_parser("list-scenarios", help="list built-in scenarios and presets")
    ls.set_defaults(func=cmd_list)

    rep = sub.add_parser("report", help="print the summary of a saved report.json")
    rep.add_argument("path")
    rep.add_argument("--csv", action="store_true", help="print the check table as CSV")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
