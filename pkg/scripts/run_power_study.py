"""Type I error and power study on the sleepstudy design.

Runs SN, CvM, DM and maxLM for every parameter while beta0 or beta1 changes
at the median of the auxiliary variable, and prints the wide tables
(rows: sample size and tested parameter, columns: d, values in percent).

Usage: python scripts/run_power_study.py --J 24 --reps 500 --out results/power
"""

import argparse
import json
import os
import sys
from pathlib import Path

import pandas as pd

from snscore.critvals import load_or_build
from snscore.simulate import STUDY_D, PARAMS, SimCondition, run_power_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--J", default="24", help="comma-separated numbers of subjects (24,48,96)")
    ap.add_argument("--d", default=",".join(map(str, STUDY_D)))
    ap.add_argument("--changed", default="beta0,beta1")
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--aux-level", choices=("observation", "subject"), default="observation")
    ap.add_argument("--info-scale", choices=("total", "per_obs"), default="total")
    ap.add_argument("--null-cache", default="nulls")
    ap.add_argument("--out", default="results/power")
    args = ap.parse_args()

    kinds = ("sn", "cvm", "dm", "maxlm")
    tables = {k: load_or_build(k, 1, 1000, 10_000, 0, args.null_cache) for k in kinds}
    conds = [SimCondition(int(J), float(d), changed, PARAMS, kinds, args.reps, args.seed, args.aux_level)
             for changed in args.changed.split(",") for J in args.J.split(",") for d in args.d.split(",")]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(i, n, cond):
        print(f"[{i}/{n}] {cond.tag()}", file=sys.stderr, flush=True)

    table = run_power_study(conds, tables=tables, jobs=args.jobs, checkpoint_dir=out.parent / "checkpoints",
                            info_scale=args.info_scale, progress=progress)
    out.with_suffix(".json").write_text(json.dumps({"power": table.to_dict(), "args": vars(args)}, indent=2))
    frames = []
    with pd.option_context("display.width", 200):
        for changed in args.changed.split(","):
            for kind in kinds:
                wide = table.layout(changed, kind)
                print(f"\n{changed} changes, statistic {kind}\n{wide}")
                frames.append(wide.reset_index().assign(changed=changed, statistic=kind))
    pd.concat(frames).to_csv(out.with_suffix(".csv"), index=False)


if __name__ == "__main__":
    main()
