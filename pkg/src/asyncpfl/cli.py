"""Command-line entry point: ``asyncpfl {run, verify, compare, report}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, write_atomic
from .experiments import compare_curves, fmt_number, map_jobs, median_or_none, rate_experiment, run_seed
from .tasks import measure_constants
from .verify import (BOUND_NAMES, HorizonTooShort, LemmaParams, ProbeConfig, check_lemma, dump_json,
                     gradcheck_suite, lemma_table)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def aggregate(cfg: ExperimentConfig, results: list[dict]) -> dict:
    sums = [r["summary"] for r in results]
    keys = ("tau_observed", "time_averaged_active", "final_grad_norm_sq", "final_loss",
            "running_average_final", "personalized_loss_mean", "end_time")
    return {"name": cfg.name, "seeds": [s["seed"] for s in sums],
            "diverged_seeds": [s["seed"] for s in sums if s["diverged"]],
            "median": {k: median_or_none([s[k] for s in sums]) for k in keys},
            "config": cfg.to_dict()}


def write_run(cfg: ExperimentConfig, results: list[dict], out: Path) -> dict:
    for r in results:
        d = out / f"seed_{r['seed']}"
        write_atomic(d / "metrics.csv", r["metrics"])
        write_atomic(d / "ledger.csv", r["ledger"])
        write_atomic(d / "summary.json", dump_json(r["summary"]) + "\n")
    agg = aggregate(cfg, results)
    write_atomic(out / "aggregate.json", dump_json(agg) + "\n")
    write_atomic(out / "config.json", cfg.echo() + "\n")
    return agg


# -- subcommands -----------------------------------------------------------------

def _load(path: str, args) -> ExperimentConfig:
    cfg = load_config(path)
    if getattr(args, "seed_override", None):
        cfg = cfg.with_seeds(args.seed_override)
    if getattr(args, "out", None):
        cfg = cfg.with_out(args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(_single_config(args), args)
    results = map_jobs(run_seed, [(cfg, s) for s in cfg.seeds], args.jobs)
    agg = write_run(cfg, results, Path(cfg.out))
    for r in results:
        s = r["summary"]
        status = "DIVERGED" if s["diverged"] else "ok"
        print(f"seed {s['seed']}: steps={s['steps']} tau={s['tau_observed']} "
              f"active={s['time_averaged_active']:.3f} final_loss={s['final_loss']!r} {status}")
    print(f"wrote {len(results)} run directories and aggregate.json under {cfg.out}")
    if agg["diverged_seeds"]:
        for r in results:
            if r["summary"]["diverged"]:
                print(f"seed {r['seed']}: {r['summary']['error']}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def verify_gradcheck(cfg: ExperimentConfig) -> tuple[int, dict]:
    fleet = cfg.fleet.build()
    report = gradcheck_suite(fleet, np.random.default_rng(cfg.seeds[0]), probes=cfg.verify.probes,
                             tol=cfg.verify.gradcheck_tol)
    print(report.table())
    return (EXIT_OK if report.passed else EXIT_FAIL), report.to_dict()


def verify_lemmas(cfg: ExperimentConfig) -> tuple[int, dict]:
    v = cfg.verify
    names = tuple(v.lemma_names) or BOUND_NAMES
    unknown = [n for n in names if n not in BOUND_NAMES]
    if unknown:
        raise ConfigError("verify.lemma_names", f"unknown bound {unknown[0]!r}")
    if "moreau_diversity" in names and any(s < 7 for s in v.lemma_lams):
        raise ConfigError("verify.lemma_lams",
                          "the Moreau diversity bound requires lam >= 7 L; "
                          f"got lam/L values {list(v.lemma_lams)}")
    if any(s <= 1 for s in v.lemma_lams):
        raise ConfigError("verify.lemma_lams", "lam/L must exceed 1 (kappa = lam / L > 1)")
    fleet = cfg.fleet.build()
    constants = measure_constants(fleet, max(100, v.probes), np.random.default_rng(1))
    L = constants.L
    probe = ProbeConfig(pairs=v.pairs, draws=v.draws, maml_bias_draws=v.bias_draws, variance_draws=v.draws)
    reports = []
    for name in names:
        if name.startswith("maml"):
            grid = [LemmaParams(alpha=a / L) for a in v.lemma_alphas]
        else:
            grid = [LemmaParams(lam=s * L, nu=1e-10, max_steps=None) for s in v.lemma_lams]
        for params in grid:
            rep = check_lemma(name, fleet, params, probe, np.random.default_rng(cfg.seeds[0]), constants)
            rep.probe = dict(rep.probe, alpha=params.alpha, lam=params.lam)
            reports.append(rep)
    print(lemma_table(reports))
    ok = all(r.passed for r in reports)
    return (EXIT_OK if ok else EXIT_FAIL), {"passed": ok, "reports": [r.to_dict() for r in reports]}


def verify_rates(cfg: ExperimentConfig, jobs: int = 1) -> tuple[int, dict]:
    res = rate_experiment(cfg, jobs)
    print(f"theorem stepsize eta = {res['eta']!r} (L = {res['L']!r})")
    for label, runs in res["runs"].items():
        for r in runs:
            print(f"{label:<10} seed {r['seed']}: tau={r['tau']} threshold={r['threshold']:.6g} "
                  f"c1={r['c1']:.6g} c2={r['c2']:.6g} running_avg_T={r['curve_final']:.6g}")
    print(f"median c2: base {res['median_c2']['base']:.6g}, "
          f"upload x{res['factor']:g} {res['median_c2']['stretched']:.6g}")
    return (EXIT_OK if res["transient_not_decreased"] else EXIT_FAIL), res


def cmd_verify(args) -> int:
    cfg = _load(_single_config(args), args)
    if args.suite == "gradcheck":
        code, payload = verify_gradcheck(cfg)
    elif args.suite == "lemmas":
        code, payload = verify_lemmas(cfg)
    else:
        try:
            code, payload = verify_rates(cfg, args.jobs)
        except HorizonTooShort as exc:
            print(f"refused: {exc}", file=sys.stderr)
            return EXIT_USAGE
    write_atomic(Path(cfg.out) / f"verify_{args.suite}.json", dump_json(payload) + "\n")
    return code


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_number(v) for v in r])
    return buf.getvalue()


def cmd_compare(args) -> int:
    paths = _paths(args)
    if len(paths) < 2:
        print("compare needs at least two configs", file=sys.stderr)
        return EXIT_USAGE
    configs = [_load(p, args) for p in paths]
    labels = []
    for p, c in zip(paths, configs):
        lab = c.name or Path(p).stem
        while lab in labels:
            lab += "'"
        labels.append(lab)
    curve_rows, pers_rows, by = compare_curves(configs, labels, args.jobs)
    out = Path(args.out or configs[0].out)
    write_atomic(out / "compare.csv", _rows_csv(("method", "seed", "time", "metric", "value"), curve_rows))
    write_atomic(out / "personalization.csv", _rows_csv(("method", "seed", "client", "loss"), pers_rows))
    table = {lab: median_or_none([by[(lab, s)]["summary"]["personalized_loss_mean"] for s in configs[0].seeds])
             for lab in labels}
    write_atomic(out / "compare_summary.json", dump_json({"personalized_loss_median": table,
                                                           "labels": labels}) + "\n")
    for lab in labels:
        print(f"{lab:<24} median personalized loss {table[lab]!r}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.out or (load_config(args.config[0]).out if args.config else "runs"))
    aggs = sorted(root.rglob("aggregate.json"))
    if not aggs:
        print(f"no aggregate.json under {root}", file=sys.stderr)
        return EXIT_USAGE
    rows = []
    for p in aggs:
        a = json.loads(p.read_text())
        rule = a["config"]["rule"]
        rows.append((str(p.parent.relative_to(root)) or ".", rule["option"], a["median"]))
    best = {}
    for k, (name, opt, med) in enumerate(rows):
        val = med.get("final_loss")
        if val is not None and (opt not in best or val < rows[best[opt]][2]["final_loss"]):
            best[opt] = k
    print(f"{'run':<32}{'option':>7}{'final loss':>16}{'pers. loss':>16}{'tau':>6}{'active':>9}")
    for k, (name, opt, med) in enumerate(rows):
        mark = "  best" if best.get(opt) == k else ""
        print(f"{name:<32}{opt:>7}{_num(med.get('final_loss')):>16}{_num(med.get('personalized_loss_mean')):>16}"
              f"{_num(med.get('tau_observed'), '.0f'):>6}{_num(med.get('time_averaged_active'), '.3f'):>9}{mark}")
    return EXIT_OK


def _num(v, spec: str = ".6g") -> str:
    return "-" if v is None else format(v, spec)


def _paths(args) -> list:
    pos = args.configs
    pos = [pos] if isinstance(pos, str) else list(pos or [])
    return pos + list(args.config or [])


def _single_config(args) -> str:
    paths = _paths(args)
    if len(paths) != 1:
        raise ConfigError("--config", "exactly one config file is required")
    return paths[0]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", help="config file, TOML or JSON (repeatable for compare)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")
    common.add_argument("--seed-override", type=int, nargs="+", metavar="SEED", help="replace the seed list")

    parser = argparse.ArgumentParser(prog="asyncpfl", description="Asynchronous personalized FL simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", parents=[common], help="simulate every seed of a config")
    pr.add_argument("configs", nargs="?", help="config file")
    pr.set_defaults(fn=cmd_run)
    pv = sub.add_parser("verify", parents=[common], help="run a verification suite")
    pv.add_argument("suite", choices=("gradcheck", "lemmas", "rates"))
    pv.add_argument("configs", nargs="?", help="config file")
    pv.set_defaults(fn=cmd_verify)
    pc = sub.add_parser("compare", parents=[common], help="align several configs by simulated time")
    pc.add_argument("configs", nargs="*", help="config files")
    pc.set_defaults(fn=cmd_compare)
    pp = sub.add_parser("report", parents=[common], help="tabulate aggregate.json files")
    pp.set_defaults(fn=cmd_report, configs=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
