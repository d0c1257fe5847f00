"""Deployed-model loss per method on a heterogeneous fleet, and the MAML batch-size plateau."""

import argparse
import json
from pathlib import Path

from asyncpfl.config import write_atomic
from asyncpfl.experiments import batch_plateau, personalization_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--heterogeneity", type=float, nargs="+", default=[0.0, 1.0, 5.0])
    ap.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 4, 16])
    ap.add_argument("--out", default="results/personalization.json")
    args = ap.parse_args()
    out = {"personalization": {}, "plateau": None}
    for h in args.heterogeneity:
        res = personalization_comparison(range(args.seeds), heterogeneity=h)
        out["personalization"][h] = res
        med = res["median"]
        print(f"heterogeneity {h:4.1f}: A {med['A']:.4f}  B {med['B']:.4f}  C {med['C']:.4f}")
    plateau = batch_plateau(args.batch_sizes, range(args.seeds))
    out["plateau"] = {str(k): v for k, v in plateau.items()}
    for b in args.batch_sizes:
        print(f"batch {b:3d}: plateau median {plateau['median'][b]:.5f}")
    write_atomic(Path(args.out), json.dumps(out, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
