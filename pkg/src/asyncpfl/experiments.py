"""Experiment drivers shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, fleet_smoothness
from .estimators import personalized_losses, rule_to_dict
from .numerics import SeededRng
from .simulator import METRIC_COLUMNS, RunLog, simulate_async, simulate_sync
from .verify import fit_rate, theorem_stepsize


def simulate(cfg: ExperimentConfig, seed: int) -> tuple[RunLog, list]:
    fleet = cfg.fleet.build()
    rule = cfg.make_rule()
    sched = cfg.schedule
    delays = sched.delay_model(cfg.fleet.n, cfg.fleet.seed)
    rng = SeededRng(seed)
    if sched.mode == "async":
        log = simulate_async(fleet, rule, cfg.Q, cfg.beta, delays, cfg.horizon(), rng,
                             track_metrics=cfg.track_metrics)
    else:
        log = simulate_sync(fleet, rule, cfg.Q, cfg.beta, delays, sched.participation, cfg.horizon(), rng,
                            track_metrics=cfg.track_metrics)
    return log, fleet


def fmt_number(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def metrics_csv(log: RunLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    cols = [log.metrics[c] for c in METRIC_COLUMNS]
    for row in zip(*cols):
        writer.writerow([fmt_number(v) for v in row])
    return buf.getvalue()


def ledger_csv(log: RunLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("t", "client", "omega", "staleness"))
    for r in log.ledger:
        writer.writerow((r.t, r.client, r.omega, r.staleness))
    return buf.getvalue()


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Simulate one seed and return everything its run directory needs."""
    log, fleet = simulate(cfg, seed)
    rule = cfg.make_rule()
    summary = log.summary()
    pers = personalized_losses(fleet, log.w_final, rule)
    summary.update(seed=seed, personalized_loss_mean=float(pers.mean()), config=cfg.to_dict())
    return {"seed": seed, "summary": summary, "metrics": metrics_csv(log), "ledger": ledger_csv(log),
            "personalized": [float(x) for x in pers], "curve": _curve(log)}


def _curve(log: RunLog) -> dict:
    return {k: [float(v) for v in log.metrics[k]] for k in ("time", "grad_norm_sq", "loss", "active_ratio")}


def map_jobs(fn, args: list, jobs: int) -> list:
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def median_or_none(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.median(vals)) if vals else None


def rate_experiment(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Theorem-stepsize runs at the configured delays and at ``rate_tau_factor`` times the upload delays."""
    if cfg.steps is None:
        raise ConfigError("steps", "the rate suite needs a step horizon")
    fleet = cfg.fleet.build()
    L = fleet_smoothness(fleet)
    rule = cfg.make_rule()
    eta = theorem_stepsize(rule, L, cfg.Q, cfg.steps)
    base = replace(cfg, rule=rule_to_dict(replace(rule, eta=eta)), time=None)
    stretched = replace(base, schedule=stretch_uploads(base.schedule, cfg.verify.rate_tau_factor))
    factor = cfg.verify.rate_tau_factor
    out = {"eta": eta, "L": L, "factor": factor, "runs": {}}
    for label, c in (("base", base), ("stretched", stretched)):
        out["runs"][label] = map_jobs(_rate_seed, [(c, s, L) for s in c.seeds], jobs)
    c2 = {k: median_or_none([r["c2"] for r in v]) for k, v in out["runs"].items()}
    out["median_c2"] = c2
    out["transient_not_decreased"] = bool(c2["stretched"] >= c2["base"])
    return out


def stretch_uploads(sched, factor: float):
    """Scale upload delays only; scaling both legs would just relabel time and leave staleness unchanged."""
    if sched.delays == "heterogeneous":
        return replace(sched, ratio=tuple(r * factor for r in sched.ratio))
    up = sched.upload
    return replace(sched, upload=tuple(x * factor for x in up) if isinstance(up, tuple) else up * factor)


def _rate_seed(cfg: ExperimentConfig, seed: int, L: float) -> dict:
    log, _ = simulate(cfg, seed)
    if log.diverged:
        raise RuntimeError(f"seed {seed} diverged: {log.error}")
    rule = cfg.make_rule()
    fit = fit_rate(log, log.tau_observed, rule=rule, Q=cfg.Q, L=L)
    curve = fit.curve
    early = min(199, len(curve) - 1)
    return dict(fit.to_dict(), seed=seed, curve_early=float(curve[early]))


def _same_fleet(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    return a.fleet == b.fleet and tuple(a.seeds) == tuple(b.seeds)


def compare_curves(configs: Sequence[ExperimentConfig], labels: Sequence[str], jobs: int = 1):
    """Run every config on every seed; return long-format curve rows and personalization rows."""
    ref = configs[0]
    for c, lab in zip(configs[1:], labels[1:]):
        if not _same_fleet(ref, c):
            raise ConfigError(lab, "compared configs must share the fleet settings and seed list")
    jobs_list = [(c, s) for c in configs for s in ref.seeds]
    results = map_jobs(run_seed, jobs_list, jobs)
    by = {(lab, s): results[k * len(ref.seeds) + j]
          for k, lab in enumerate(labels) for j, s in enumerate(ref.seeds)}
    curve_rows, pers_rows = [], []
    for s in ref.seeds:
        stop = min(by[(lab, s)]["summary"]["end_time"] for lab in labels)
        for lab in labels:
            cur = by[(lab, s)]["curve"]
            for k, t in enumerate(cur["time"]):
                if t > stop:
                    break
                for metric in ("grad_norm_sq", "loss", "active_ratio"):
                    curve_rows.append((lab, s, t, metric, cur[metric][k]))
            for client, loss in enumerate(by[(lab, s)]["personalized"]):
                pers_rows.append((lab, s, client, loss))
    return curve_rows, pers_rows, by




# -- desk-scale experiments used by the scripts and the acceptance suite ------------

def concurrency_comparison(n: int = 50, seeds: Sequence[int] = range(5), time: float = 300.0,
                           participation: float = 0.8, Q: int = 10, delay_seed: int = 0) -> dict:
    """Time-averaged active ratio, async vs sync, on per-client delays with upload/download ratio 4-6."""
    from .estimators import OptionA
    from .simulator import DelayModel, Horizon
    from .tasks import make_fleet

    fleet = make_fleet("quadratic", n, 1.0, 10, np.random.default_rng(delay_seed), noise=0.1, lipschitz=1.0)
    delays = DelayModel.heterogeneous(n, np.random.default_rng(delay_seed))
    rule = OptionA(0.003)
    out = {"async": [], "sync": []}
    for s in seeds:
        a = simulate_async(fleet, rule, Q, 1.0, delays, Horizon(time=time), SeededRng(s), track_metrics=False)
        y = simulate_sync(fleet, rule, Q, 1.0, delays, participation, Horizon(time=time), SeededRng(s),
                          track_metrics=False)
        out["async"].append(a.time_averaged_active())
        out["sync"].append(y.time_averaged_active())
    out["median"] = {k: float(np.median(v)) for k, v in list(out.items())}
    return out


def personalization_comparison(seeds: Sequence[int] = range(5), n: int = 20, dim: int = 10,
                               heterogeneity: float = 5.0, steps: int = 3000, Q: int = 2,
                               eta: float = 0.05) -> dict:
    """Mean deployed-model loss per client for Options A, B and C on a strongly heterogeneous fleet.

    Each seed draws its own fleet; B adapts with ``alpha = 0.5 / L`` and C
    uses ``lam = 2 L``.
    """
    from .estimators import OptionA, OptionB, OptionC
    from .simulator import DelayModel, Horizon
    from .tasks import make_fleet

    res = {"A": [], "B": [], "C": []}
    for s in seeds:
        fleet = make_fleet("quadratic", n, heterogeneity, dim, np.random.default_rng(100 + s),
                           noise=0.1, lipschitz=1.0)
        L = fleet_smoothness(fleet)
        rules = {"A": OptionA(eta),
                 "B": OptionB(eta, 0.5 / L, "exact", batch_size=4),
                 "C": OptionC(eta, 2 * L, nu=1e-10, max_steps=50, batch_size=4)}
        for key, rule in rules.items():
            log = simulate_async(fleet, rule, Q, 1.0, DelayModel.uniform(n), Horizon(steps=steps), SeededRng(s),
                                 track_metrics=False)
            res[key].append(float(personalized_losses(fleet, log.w_final, rule).mean()))
    res["median"] = {k: float(np.median(v)) for k, v in list(res.items())}
    return res


def batch_plateau(batch_sizes: Sequence[int] = (1, 4), seeds: Sequence[int] = range(5), n: int = 20,
                  dim: int = 10, steps: int = 3000, Q: int = 2, eta: float = 0.05, alpha_scale: float = 0.5,
                  noise: float = 2.0) -> dict:
    """Plateau of the MAML run's squared gradient norm for each batch size (fixed ``alpha``).

    The plateau is the running average restricted to the second half of the
    horizon, i.e. after the transient has died out.
    """
    from .estimators import OptionB
    from .simulator import DelayModel, Horizon
    from .tasks import make_fleet

    fleet = make_fleet("quadratic", n, 1.0, dim, np.random.default_rng(7), noise=noise, lipschitz=1.0)
    L = fleet_smoothness(fleet)
    out: dict = {}
    for b in batch_sizes:
        vals = []
        for s in seeds:
            rule = OptionB(eta, alpha_scale / L, "exact", batch_size=b)
            log = simulate_async(fleet, rule, Q, 1.0, DelayModel.uniform(n), Horizon(steps=steps), SeededRng(s))
            vals.append(tail_average(log))
        out[b] = vals
    out["median"] = {b: float(np.median(out[b])) for b in batch_sizes}
    return out


def tail_average(log: RunLog, start_fraction: float = 0.5) -> float:
    g = np.asarray(log.metrics["grad_norm_sq"][: log.steps], dtype=float)
    return float(g[int(len(g) * start_fraction):].mean())


RATE_FLEET = {"kind": "quadratic", "n": 20, "dim": 20, "heterogeneity": 1.0, "noise": 0.1,
              "rows": 2000, "lipschitz": 0.005, "seed": 0}
RATE_RULES = {
    "A": {"option": "A"},
    "B": {"option": "B", "alpha_scale": 0.1, "hvp_mode": "exact"},
    "C": {"option": "C", "lam_scale": 10.0, "nu": 1e-10, "max_steps": 20},
}


def rate_shape_config(option: str, seeds: Sequence[int] = range(5), steps: int = 20000) -> ExperimentConfig:
    """Well-conditioned, slowly-varying fleet whose horizon thresholds fit inside ``steps``.

    Long downloads and short uploads keep the staleness small enough for the
    cubic horizon threshold of plain SGD to be met at ``steps = 20000``.
    """
    from .config import from_dict

    return from_dict({
        "name": f"rates-{option}", "seeds": list(seeds), "Q": 2, "steps": steps,
        "fleet": dict(RATE_FLEET), "rule": dict(RATE_RULES[option]),
        "schedule": {"mode": "async", "download": [8.0, 12.0], "upload": [0.25, 0.75]},
        "verify": {"rate_tau_factor": 2.0},
    })
