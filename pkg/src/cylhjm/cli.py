"""Command-line interface: ``cylhjm <subcommand> CONFIG [--out DIR]``.

Exit codes: 0 all checks pass, 2 a check failed, 1 invalid input,
3 numerical blow-up.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checks as _checks
from .config import ConfigError, bundled_scenarios, load_config
from .evolution import NumericalBlowupError
from .report import build_report, write_json, write_report

EXIT_OK, EXIT_INPUT, EXIT_FAIL, EXIT_BLOWUP = 0, 1, 2, 3


def run(subcommand: str, config_path, out_dir=None, *, seed=None, n_paths=None, workers=None,
        stream=None) -> int:
    """Run one subcommand and write ``report.json`` plus CSV tables into ``out_dir``."""
    stream = sys.stderr if stream is None else stream
    if subcommand not in _checks.SUBCOMMANDS:
        print(f"error: unknown subcommand {subcommand!r}", file=stream)
        return EXIT_INPUT
    try:
        cfg = load_config(config_path)
        cfg = cfg.with_overrides(seed=seed, n_paths=n_paths, workers=workers)
        outcome = _checks.SUBCOMMANDS[subcommand](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_INPUT
    except NumericalBlowupError as exc:
        print(f"error: numerical blow-up: {exc}", file=stream)
        return EXIT_BLOWUP
    except KeyError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=stream)
        return EXIT_INPUT
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_INPUT

    out = Path(out_dir if out_dir is not None else cfg.output) / subcommand
    out.mkdir(parents=True, exist_ok=True)
    files = [t.write(out).name for t in outcome.tables]
    for name, data in outcome.attachments.items():
        files.append(write_json(out / f"{name}.json", data).name)
    report = build_report(cfg.name, cfg.scenario_hash, subcommand, outcome.checks, files)
    write_report(out / "report.json", report)
    for c in outcome.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}", file=stream)
    return EXIT_OK if outcome.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cylhjm",
        description="Measure-valued HJM simulation and property checks.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name, fn in _checks.SUBCOMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("config", help="scenario YAML file or bundled scenario name")
        p.add_argument("--out", help="output directory (default: the scenario's 'output')")
        p.add_argument("--seed", type=int, help="override driver.seed")
        p.add_argument("--n-paths", type=int, help="override driver.n_paths")
        p.add_argument("--workers", type=int, help="override driver.workers")
    sub.add_parser("scenarios", help="list the bundled scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.subcommand == "scenarios":
        print("\n".join(bundled_scenarios()))
        return EXIT_OK
    return run(args.subcommand, args.config, args.out, seed=args.seed, n_paths=args.n_paths,
               workers=args.workers)


if __name__ == "__main__":
    sys.exit(main())
