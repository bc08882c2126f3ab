"""Build and cache the Brownian-bridge null tables used by the tests and the study.

Usage: python scripts/build_null_tables.py --cache nulls --max-q 2
"""

import argparse
import time

from snscore.critvals import grid_drift, load_or_build


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default="nulls")
    ap.add_argument("--kinds", default="sn,cvm,dm,maxlm")
    ap.add_argument("--max-q", type=int, default=1)
    ap.add_argument("--grid-size", type=int, default=1000)
    ap.add_argument("--reps", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--check-drift", action="store_true", help="also report the grid-doubling drift")
    args = ap.parse_args()

    for kind in args.kinds.split(","):
        for q in range(1, args.max_q + 1):
            t0 = time.perf_counter()
            table = load_or_build(kind, q, args.grid_size, args.reps, args.seed, args.cache)
            cv = ", ".join(f"{a:g}: {v:.4f}" for a, v in sorted(table.quantiles.items()))
            line = f"{kind:6s} q={q}  {cv}  ({time.perf_counter() - t0:.1f}s)"
            if args.check_drift:
                line += f"  drift {100 * grid_drift(kind, q, args.grid_size, args.reps, args.seed):.2f}%"
            print(line, flush=True)


if __name__ == "__main__":
    main()
