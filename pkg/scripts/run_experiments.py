#!/usr/bin/env python3
"""Run the full experiment suite and drop CSVs + plots into results/.

Usage:
    python3 scripts/run_experiments.py [--out results] [--quick] [--only e2]
"""

import argparse
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from railgun import bench


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results")
    parser.add_argument("--quick", action="store_true",
                        help="small runs for a fast sanity pass")
    parser.add_argument("--only", choices=["e1", "e2", "e3", "e4"],
                        help="run a single experiment")
    args = parser.parse_args()

    runners = {
        "e1": bench.run_e1_hopping_cost,
        "e2": bench.run_e2_window_size,
        "e3": bench.run_e3_iterators,
        "e4": bench.run_e4_scaling,
    }
    with tempfile.TemporaryDirectory(prefix="railgun-exp-") as workdir:
        if args.only:
            rows = runners[args.only](workdir, args.out, quick=args.quick)
            for row in rows:
                print(row)
        else:
            bundle = bench.run_paper_experiments(workdir, args.out,
                                                 quick=args.quick)
            for name, rows in bundle.items():
                print(f"== {name}: {len(rows)} rows")
    print(f"outputs in {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
