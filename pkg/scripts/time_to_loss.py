"""Simulated time for async and sync training to reach fixed loss levels (seed medians)."""

import argparse

import numpy as np

from asyncpfl.estimators import OptionA
from asyncpfl.numerics import SeededRng
from asyncpfl.simulator import DelayModel, Horizon, simulate_async, simulate_sync
from asyncpfl.tasks import make_fleet


def first_time(log, level):
    for t, f in zip(log.metrics["time"], log.metrics["loss"]):
        if f <= level:
            return t
    return float("inf")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--time", type=float, default=400.0)
    ap.add_argument("--eta", type=float, default=0.003)
    ap.add_argument("--Q", type=int, default=10)
    ap.add_argument("--participation", type=float, default=0.8)
    args = ap.parse_args()
    fleet = make_fleet("quadratic", args.n, 1.0, 20, np.random.default_rng(0), noise=0.1, lipschitz=1.0)
    delays = DelayModel.heterogeneous(args.n, np.random.default_rng(0))
    rule = OptionA(args.eta)
    runs = {"async": [], "sync": []}
    for s in range(args.seeds):
        runs["async"].append(simulate_async(fleet, rule, args.Q, 1.0, delays, Horizon(time=args.time),
                                            SeededRng(s)))
        runs["sync"].append(simulate_sync(fleet, rule, args.Q, 1.0, delays, args.participation,
                                          Horizon(time=args.time), SeededRng(s)))
    start = runs["async"][0].metrics["loss"][0]
    floor = min(min(l.metrics["loss"]) for v in runs.values() for l in v)
    for frac in (0.5, 0.2, 0.1, 0.05):
        level = floor + frac * (start - floor)
        med = {k: float(np.median([first_time(l, level) for l in v])) for k, v in runs.items()}
        print(f"loss <= {level:.4f}: async t={med['async']:.1f}  sync t={med['sync']:.1f}")


if __name__ == "__main__":
    main()
