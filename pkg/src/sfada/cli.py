"""Command-line entry point: ``sfada <subcommand> [flags]``.

Precedence for every setting is flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import harness

log = logging.getLogger("sfada")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", type=Path, required=out_required, help="artifact directory")
    p.add_argument("--ablate", action="append", default=[], metavar="KEY=BOOL",
                   help=f"toggle a component ({', '.join(sorted(C.ABLATION_KEYS))}); repeatable")
    p.add_argument("--budget", type=float, help="oracle budget as a fraction of the target set")
    p.add_argument("--rounds", type=int, help="number of active selection rounds")
    p.add_argument("--label", help="row label used by compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfada", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("pretrain-source", help="train encoder and classifier on the source domain"))
    _common(sub.add_parser("train-generator", help="fit the feature generator to the frozen source classifier"))
    _common(sub.add_parser("adapt", help="active selection and adaptation from a stage-one checkpoint"))
    _common(sub.add_parser("evaluate", help="score the adapted model on the target domain"))
    p = sub.add_parser("run-all", help="every stage end to end")
    _common(p)
    p.add_argument("--cache", type=Path, help="directory for reusable stage-one checkpoints")
    p.add_argument("--no-features", action="store_true", help="skip the target feature dump")
    p = sub.add_parser("export-features", help="dump features from the stage-one model")
    _common(p)
    p.add_argument("--what", choices=("source", "target", "generator"), default="generator")
    p.add_argument("--per-class", type=int, default=100)
    p = sub.add_parser("compare", help="tabulate several report.json files")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="write comparison.csv and comparison.txt here")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    return C.apply_overrides(cfg, seed=args.seed, budget=args.budget, rounds=args.rounds, ablate=args.ablate,
                             label=args.label)


def _run(args) -> int:
    if args.command == "compare":
        reports = [json.loads(p.read_text()) for p in args.reports]
        rows = harness.compare(reports)
        if args.out:
            harness.write_comparison(rows, args.out)
        sys.stdout.write(harness.format_comparison(rows))
        return 0

    cfg = resolve_config(args)  # validation happens before anything is written
    args.out.mkdir(parents=True, exist_ok=True)
    if args.command == "pretrain-source":
        print(harness.pretrain_to(cfg, args.out))
    elif args.command == "train-generator":
        print(harness.generator_to(cfg, args.out))
    elif args.command == "adapt":
        report = harness.adapt_from(cfg, args.out)
        print(json.dumps(report["final"], sort_keys=True))
    elif args.command == "evaluate":
        print(json.dumps(harness.evaluate_from(cfg, args.out), sort_keys=True))
    elif args.command == "export-features":
        print(harness.export_from(cfg, args.out, args.what, args.per_class))
    elif args.command == "run-all":
        report = harness.run_all(cfg, args.out, cache_dir=args.cache, dump_features=not args.no_features)
        print(f"{report['label']} seed={cfg.seed} accuracy={report['final']['accuracy']:.4f} "
              f"qwk={report['final']['qwk']} report_hash={report['report_hash']}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except harness.RunFailure as exc:
        print(f"run failed: {exc} (see {args.out / 'failure.json'})", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
