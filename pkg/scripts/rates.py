"""Running-average gradient norm under theorem stepsizes, at two staleness levels per option."""

import argparse
import json
from pathlib import Path

from asyncpfl.config import write_atomic
from asyncpfl.experiments import rate_experiment, rate_shape_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--options", default="ABC")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="results/rates.json")
    args = ap.parse_args()
    out = {}
    for opt in args.options:
        res = rate_experiment(rate_shape_config(opt, range(args.seeds), args.steps), args.jobs)
        out[opt] = res
        for label, runs in res["runs"].items():
            ratios = [r["curve_final"] / r["curve_early"] for r in runs]
            taus = [r["tau"] for r in runs]
            print(f"Option {opt} {label:<9} tau {taus}  avg(T)/avg(200) max {max(ratios):.4f}  "
                  f"median c2 {res['median_c2'][label]:.6g}")
    write_atomic(Path(args.out), json.dumps(out, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
