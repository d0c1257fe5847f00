"""Time-averaged fraction of active clients, asynchronous vs synchronous rounds."""

import argparse
import json
from pathlib import Path

from asyncpfl.config import write_atomic
from asyncpfl.experiments import concurrency_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--participation", type=float, nargs="+", default=[0.2, 0.5, 0.8, 1.0])
    ap.add_argument("--time", type=float, default=300.0)
    ap.add_argument("--out", default="results/concurrency.json")
    args = ap.parse_args()
    table = {}
    for p in args.participation:
        res = concurrency_comparison(args.n, range(args.seeds), args.time, p)
        table[p] = res
        print(f"participation {p:4.2f}: async {res['median']['async']:.3f}  sync {res['median']['sync']:.3f}")
    write_atomic(Path(args.out), json.dumps(table, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
