"""Numerical checks of the smoothness/variance/diversity bounds and of convergence-rate shapes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .estimators import (FleetObjective, OptionA, OptionB, OptionC, UpdateRule, maml_batch_grad,
                         maml_full_grad, maml_objective, moreau_batch_envelope, moreau_batch_grad,
                         moreau_envelope, moreau_grad_exact)
from .numerics import ClientStreams, fd_gradient, fd_jacobian_vector, rel_error
from .tasks import (ClientTask, TaskConstants, default_probe_radius, global_minimizer, measure_constants,
                    probe_points)

BOUND_NAMES = (
    "maml_smoothness", "maml_bias", "maml_variance", "maml_diversity", "maml_grad_norm",
    "moreau_smoothness", "moreau_bias", "moreau_variance", "moreau_diversity",
)


class HorizonTooShort(ValueError):
    def __init__(self, threshold: float, T: int, option: str):
        self.threshold = threshold
        super().__init__(f"horizon T={T} is below the Option {option} threshold T >= {threshold:.6g}")


@dataclass
class BoundReport:
    name: str
    bound: float
    empirical_max: float
    empirical_mean: float
    margin: float
    probe: dict
    constants: str = "analytic"
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.margin <= 1.0)

    def to_dict(self) -> dict:
        return {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                for k, v in asdict(self).items()}


@dataclass
class LemmaParams:
    alpha: float = 0.0
    lam: float | None = None
    batch_size: int = 10
    inner_batch_size: int | None = None
    hess_batch_size: int | None = None
    hvp_mode: str = "exact"
    nu: float | None = None
    max_steps: int | None = 10


@dataclass
class ProbeConfig:
    radius: float | None = None
    points: int = 50
    pairs: int = 1000
    bias_points: int = 2
    draws: int = 10_000
    maml_bias_draws: int = 100_000
    variance_draws: int = 10_000

    def __post_init__(self):
        if self.points < 1 or self.pairs < 1 or self.draws < 2 or self.bias_points < 1:
            raise ValueError("insufficient probes")


def _margin(empirical: float, bound: float, floor: float = 1e-12) -> float:
    if bound > 0:
        return empirical / bound
    return 0.0 if empirical <= floor else math.inf


def gradient_bound_on_ball(fleet: Sequence[ClientTask], center: np.ndarray, radius: float) -> float:
    """Upper bound on ``max_i sup_{||w - center|| <= r} ||grad f_i(w)||``."""
    return max(float(np.linalg.norm(t.grad(center))) + t.smoothness * radius for t in fleet)


def _provenance(constants: TaskConstants, names) -> str:
    return "estimated" if any(constants.provenance.get(k) == "estimated" for k in names) else "analytic"


def _monte_carlo(sample, full: np.ndarray, draws: int):
    """Mean-bias norm, its standard error, mean squared error and that mean's standard error."""
    d = full.shape[0]
    total = np.zeros(d)
    total_sq = np.zeros(d)
    sq_err = np.empty(draws)
    for k in range(draws):
        v = sample()
        total += v
        total_sq += v * v
        e = v - full
        sq_err[k] = e @ e
    mean = total / draws
    var = np.maximum(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    se_bias = math.sqrt(var.sum() / draws)
    return (float(np.linalg.norm(mean - full)), se_bias, float(sq_err.mean()),
            float(sq_err.std(ddof=1) / math.sqrt(draws)))


def check_lemma(name: str, fleet: Sequence[ClientTask], params: LemmaParams, probe: ProbeConfig | None = None,
                rng: np.random.Generator | None = None, constants: TaskConstants | None = None) -> BoundReport:
    """Compare an empirical quantity against its analytic bound on a probe ball."""
    if name not in BOUND_NAMES:
        raise ValueError(f"unknown bound {name!r}; choose from {BOUND_NAMES}")
    probe = probe or ProbeConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    constants = constants or measure_constants(fleet, 100, np.random.default_rng(1))
    L = constants.L
    center = global_minimizer(fleet)
    radius = probe.radius if probe.radius is not None else default_probe_radius(fleet)
    G = gradient_bound_on_ball(fleet, center, radius)
    a = params.alpha
    lam = params.lam
    info = {"radius": radius, "G_on_ball": G}

    if name.startswith("moreau"):
        if lam is None or not lam > L:
            raise ValueError(f"lam must exceed L={L:.6g} (prox subproblem needs kappa = lam / L > 1)")
        if name == "moreau_diversity" and lam < 7 * L:
            raise ValueError(f"moreau diversity bound requires lam >= 7 L = {7 * L:.6g}; got lam={lam:.6g}")

    if name in ("maml_smoothness", "moreau_smoothness"):
        rule = OptionB(1.0, a, "exact") if name == "maml_smoothness" else OptionC(1.0, lam)
        obj = FleetObjective(fleet, rule)
        W = probe_points(center, radius, probe.pairs, rng)
        U = probe_points(center, radius, probe.pairs, rng)
        ratios = []
        for w, u in zip(W, U):
            gap = np.linalg.norm(w - u)
            diff = np.linalg.norm(obj.client_grads(w) - obj.client_grads(u), axis=1)
            ratios.append(diff.max() / gap)
        if name == "maml_smoothness":
            bound = L * (1 + a * L) ** 2 + a * constants.rho * G
            prov = _provenance(constants, ("L", "rho"))
        else:
            bound = lam * L / (lam - L)
            prov = _provenance(constants, ("L",))
        info.update(pairs=probe.pairs)
        emp = float(np.max(ratios))
        return BoundReport(name, bound, emp, float(np.mean(ratios)), _margin(emp, bound), info, prov)

    if name in ("maml_diversity", "moreau_diversity", "maml_grad_norm"):
        rule = OptionB(1.0, a, "exact") if name.startswith("maml") else OptionC(1.0, lam)
        obj = FleetObjective(fleet, rule)
        vals = []
        for w in probe_points(center, radius, probe.points, rng):
            g = obj.client_grads(w)
            if name == "maml_grad_norm":
                vals.append(float(np.linalg.norm(g, axis=1).max()))
            else:
                vals.append(float(np.mean(np.sum((g - g.mean(0)) ** 2, axis=1))))
        gg, gh = constants.gamma_g, constants.gamma_h
        if name == "maml_diversity":
            bound = 12 * (1 + a * L) ** 2 * (1 + a * a * L * L) * gg**2 + 12 * a * a * G * G * gh**2
            prov = _provenance(constants, ("L", "gamma_g", "gamma_h"))
        elif name == "moreau_diversity":
            bound = 16 * lam**2 * gg**2 / (lam**2 - 48 * L**2)
            prov = _provenance(constants, ("L", "gamma_g"))
        else:
            bound = (1 + a * L) * G
            prov = _provenance(constants, ("L",))
        info.update(points=probe.points)
        emp = float(np.max(vals))
        return BoundReport(name, bound, emp, float(np.mean(vals)), _margin(emp, bound), info, prov)

    # Monte-Carlo bias / variance checks at a few probe points, client by client
    sg = constants.sigma_g
    pts = probe_points(center, radius, probe.bias_points, rng)
    draws = probe.maml_bias_draws if name == "maml_bias" else (
        probe.variance_draws if name.endswith("variance") else probe.draws)
    worst_margin, worst_emp, worst_bound, emps = -math.inf, 0.0, 0.0, []
    nu_eff = 0.0
    clients = range(len(fleet)) if len(fleet) <= 2 else (0, len(fleet) - 1)
    for w in pts:
        for ci in clients:
            task = fleet[ci]
            streams = ClientStreams(rng, rng, rng)
            if name.startswith("maml"):
                rule = OptionB(1.0, a, params.hvp_mode, batch_size=params.batch_size,
                               inner_batch_size=params.inner_batch_size, hess_batch_size=params.hess_batch_size)
                b, b_in, b_h = rule.sizes
                full = maml_full_grad(task, w, a)

                def sample():
                    return maml_batch_grad(task, w, a, task.sample_batch(b, streams.batch),
                                           task.sample_batch(b_in, streams.inner),
                                           task.sample_batch(b_h, streams.hess), rule.hvp_mode, rule.delta)
            else:
                full = moreau_grad_exact(task, w, lam)
                residuals = []
                b = params.batch_size

                def sample():
                    est = moreau_batch_grad(task, w, lam, task.sample_batch(b, rng), nu=params.nu,
                                            max_steps=params.max_steps)
                    residuals.append(est.residual)
                    return est.vector

            bias, se_bias, mse, se_mse = _monte_carlo(sample, full, draws)
            if name.startswith("moreau"):
                nu_eff = max(residuals)
            if name == "maml_bias":
                # the bias is driven by the adaptation batch
                bound = a * L * (1 + a * L) * sg / math.sqrt(rule.sizes[1])
                emp, tol = bias, bound + 3 * se_bias
            elif name == "maml_variance":
                bb = min(rule.sizes)
                sh = constants.sigma_h
                bound = (3 * (1 + a * L) ** 2 * sg**2 * (1 / bb + a * a * L * L / bb)
                         + 3 * a * a * G * G * sh**2 / bb
                         + 3 * a * a * sg**2 * sh**2 / bb * (1 / bb + a * a * L * L / bb))
                emp, tol = mse, bound + 3 * se_mse
            elif name == "moreau_bias":
                bound = lam * nu_eff / (lam - L)
                emp, tol = bias, bound + 3 * se_bias
            else:
                bound = 2 * lam**2 / (lam - L) ** 2 * (sg**2 / b + nu_eff**2)
                emp, tol = mse, bound + 3 * se_mse
            m = _margin(emp, tol)
            emps.append(emp)
            if m > worst_margin:
                worst_margin, worst_emp, worst_bound = m, emp, bound
    info.update(points=len(pts), clients=list(clients), draws=draws, tolerance="bound + 3 standard errors")
    if name.startswith("moreau"):
        info["nu_effective"] = nu_eff
    prov = _provenance(constants, ("L", "sigma_g", "sigma_h"))
    return BoundReport(name, worst_bound, worst_emp, float(np.mean(emps)), worst_margin, info, prov)


def lemma_table(reports: Sequence[BoundReport]) -> str:
    lines = [f"{'bound':<20}{'analytic':>14}{'empirical':>14}{'margin':>10}  status"]
    for r in reports:
        lines.append(f"{r.name:<20}{r.bound:>14.6g}{r.empirical_max:>14.6g}{r.margin:>10.4f}  "
                     f"{'PASS' if r.passed else 'FAIL'}{'' if r.constants == 'analytic' else ' (estimated)'}")
    return "\n".join(lines)


# -- rate shapes ---------------------------------------------------------------

def personalized_smoothness(rule: UpdateRule, L: float, rho: float = 0.0, G: float = 0.0) -> float:
    if isinstance(rule, OptionA):
        return L
    if isinstance(rule, OptionB):
        # the curvature term vanishes for quadratics even when G is unbounded
        extra = rule.alpha * rho * G if rho > 0 and rule.alpha > 0 else 0.0
        return L * (1 + rule.alpha * L) ** 2 + extra
    return rule.lam * L / (rule.lam - L)


def horizon_threshold(rule: UpdateRule, L: float, Q: int, tau: int, rho: float = 0.0, G: float = 0.0) -> float:
    """Smallest server horizon for which the convergence guarantee applies."""
    if isinstance(rule, OptionA):
        return 160 * L * (Q + 7) * (tau + 1) ** 3
    if isinstance(rule, OptionB):
        return 64 * personalized_smoothness(rule, L, rho, G)
    return 288 * personalized_smoothness(rule, L) * (Q + 7) * (tau + 1) ** 2


def theorem_stepsize(rule: UpdateRule, L: float, Q: int, T: int, rho: float = 0.0, G: float = 0.0) -> float:
    """``eta = 1 / (Q sqrt(L_x T))`` with the smoothness constant of the rule's objective."""
    return 1.0 / (Q * math.sqrt(personalized_smoothness(rule, L, rho, G) * T))


@dataclass
class RateFit:
    T: int
    tau: int
    threshold: float
    c1: float
    c2: float
    residual: float
    curve: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"T": self.T, "tau": self.tau, "threshold": self.threshold, "c1": self.c1, "c2": self.c2,
                "residual": self.residual, "curve_final": float(self.curve[-1])}


def fit_rate(curve_or_log, tau: int, *, rule: UpdateRule, Q: int, L: float, rho: float = 0.0,
             G: float = 0.0, burn_in: int = 1, enforce_threshold: bool = True) -> RateFit:
    """Least-squares fit of the running average to ``c1 / sqrt(t) + c2 / t``.

    Refuses (``HorizonTooShort``) when the run is shorter than the horizon
    threshold of the rule's convergence guarantee.
    """
    curve = curve_or_log.running_average() if hasattr(curve_or_log, "running_average") else np.asarray(curve_or_log)
    T = len(curve)
    threshold = horizon_threshold(rule, L, Q, tau, rho, G)
    if enforce_threshold and T < threshold:
        raise HorizonTooShort(threshold, T, rule.option)
    t = np.arange(1, T + 1, dtype=float)[burn_in - 1:]
    y = curve[burn_in - 1:]
    X = np.column_stack([1 / np.sqrt(t), 1 / t])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    return RateFit(T, tau, threshold, float(coef[0]), float(coef[1]), resid, curve)


# -- gradient checks ------------------------------------------------------------

@dataclass
class GradcheckEntry:
    operation: str
    max_error: float
    worst_probe: int
    worst_coordinate: int
    probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


@dataclass
class GradcheckReport:
    entries: list

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "entries": [dict(asdict(e), passed=e.passed) for e in self.entries]}

    def table(self) -> str:
        lines = [f"{'operation':<28}{'max rel err':>14}  status"]
        for e in self.entries:
            extra = "" if e.passed else f" (probe {e.worst_probe}, coordinate {e.worst_coordinate})"
            lines.append(f"{e.operation:<28}{e.max_error:>14.3e}  {'PASS' if e.passed else 'FAIL'}{extra}")
        return "\n".join(lines)


def gradcheck_suite(fleet: Sequence[ClientTask], rng: np.random.Generator, probes: int = 100,
                    alpha: float | None = None, lam: float | None = None, batch_size: int = 5,
                    tol: float = 1e-4, radius: float | None = None) -> GradcheckReport:
    """Compare every analytic gradient path with central differences at random probes."""
    L = max(t.smoothness for t in fleet)
    alpha = 0.5 / L if alpha is None else alpha
    lam = 10 * L if lam is None else lam
    center = global_minimizer(fleet)
    radius = default_probe_radius(fleet) if radius is None else radius
    pts = probe_points(center, radius, probes, rng)

    checks = {
        "population_grad": (lambda t, w, B: t.grad(w), lambda t, w, B: (lambda x: t.loss(x))),
        "batch_grad": (lambda t, w, B: t.batch_grad(w, B[0]), lambda t, w, B: (lambda x: t.batch_loss(x, B[0]))),
        "batch_hvp": (lambda t, w, B: t.batch_hvp(w, B[2], B[0]), None),
        "maml_full_grad": (lambda t, w, B: maml_full_grad(t, w, alpha),
                           lambda t, w, B: (lambda x: maml_objective(t, x, alpha))),
        "maml_stoch_grad[exact hvp]": (
            lambda t, w, B: maml_batch_grad(t, w, alpha, B[0], B[1], B[1], "exact"),
            lambda t, w, B: (lambda x: t.batch_loss(x - alpha * t.batch_grad(x, B[1]), B[0]))),
        "moreau_grad_exact": (lambda t, w, B: moreau_grad_exact(t, w, lam),
                              lambda t, w, B: (lambda x: moreau_envelope(t, x, lam))),
        "moreau_grad_stoch[nu=1e-10]": (
            lambda t, w, B: moreau_batch_grad(t, w, lam, B[0], nu=1e-10).vector,
            lambda t, w, B: (lambda x: moreau_batch_envelope(t, x, lam, B[0]))),
    }
    worst = {k: (0.0, -1, -1) for k in checks}
    for p, w in enumerate(pts):
        task = fleet[p % len(fleet)]
        B = (task.sample_batch(batch_size, rng), task.sample_batch(batch_size, rng), rng.standard_normal(task.dim))
        for name, (analytic, field_fn) in checks.items():
            g = analytic(task, w, B)
            if field_fn is None:
                ref = fd_jacobian_vector(lambda x: task.batch_grad(x, B[0]), w, B[2])
            else:
                ref = fd_gradient(field_fn(task, w, B), w)
            err = rel_error(g, ref)
            if err > worst[name][0]:
                worst[name] = (err, p, int(np.argmax(np.abs(g - ref))))
    entries = [GradcheckEntry(k, v[0], v[1], v[2], probes, tol) for k, v in worst.items()]
    return GradcheckReport(entries)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# -- schedule checks -----------------------------------------------------------

def staleness_soundness(log) -> list[int]:
    """Ledger rows whose snapshot hash differs from the server history at ``omega``."""
    return [k for k, row in enumerate(log.ledger)
            if not 0 <= row.omega <= row.t or row.snapshot_hash != log.history_hashes[row.omega]]


def replay_staleness(delays, T: int, seed: int) -> np.ndarray:
    """Brute-force staleness of the first ``T`` server steps, from the delay streams alone.

    Each client's download/upload durations are regenerated from its own
    stream, every cycle's (download-complete, arrival) pair is laid on the
    time axis, and the download step of an update is counted directly as the
    number of arrivals ordered before its download event.
    """
    from .numerics import SeededRng
    from .simulator import DOWNLOAD, UPLOAD

    n = delays.n
    rngs = SeededRng(seed)
    horizon = max(d.mean + u.mean for d, u in zip(delays.download, delays.upload)) * (T / n + 2)
    while True:
        cycles = []  # (download key, arrival key)
        for i in range(n):
            rng = rngs.stream(i, "delay")
            now = 0.0
            while now <= horizon:
                dl = now + delays.download[i].sample(rng)
                arr = dl + delays.upload[i].sample(rng)
                cycles.append(((dl, DOWNLOAD, i), (arr, UPLOAD, i)))
                now = arr
        arrivals = sorted(c[1] for c in cycles)
        if len(arrivals) >= T and arrivals[T - 1][0] < horizon:
            break
        horizon *= 2
    arrivals = arrivals[:T]
    by_arrival = {c[1]: c[0] for c in cycles}
    stale = np.empty(T, dtype=int)
    for t, key in enumerate(arrivals):
        dl = by_arrival[key]
        # exhaustive count of arrivals ordered before the download event
        before = 0
        for k in range(T):
            ak = arrivals[k]
            if ak < dl:
                before += 1
        stale[t] = t - before
    return stale
