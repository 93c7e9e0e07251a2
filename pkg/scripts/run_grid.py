"""Run the ablation / selection grid over several seeds and print the comparison table.

    python scripts/run_grid.py --out grid_out --seeds 0 1 2 3 4 [--config cfg.json]
"""

import argparse
import json
import logging
from pathlib import Path

from sfada import config as C
from sfada.grid import VARIANTS, run_grid
from sfada.harness import format_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("grid_out"))
    ap.add_argument("--cache", type=Path, help="stage-one cache (default: OUT/cache)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--only", nargs="+", choices=list(VARIANTS), help="subset of grid rows")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    base = C.load(args.config) if args.config else C.RunConfig()
    res = run_grid(base, args.seeds, args.out, args.cache or args.out / "cache", args.only)
    print(format_comparison(res["rows"]))
    print(json.dumps(res["summary"], indent=2))


if __name__ == "__main__":
    main()
