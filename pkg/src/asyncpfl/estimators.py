"""Personalized gradient estimators (plain SGD, MAML, Moreau envelope) and exact oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence, Union

import numpy as np

from .numerics import ClientStreams, NonFiniteError, check_finite
from .tasks import ClientTask, DataBatch

HVP_MODES = ("exact", "first_order", "dropped")


class InnerSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptionA:
    """Plain local SGD."""

    eta: float
    batch_size: int = 1

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    option = "A"


@dataclass(frozen=True)
class OptionB:
    """One-step MAML with three independent batches.

    ``batch_size`` is the outer batch, ``inner_batch_size`` the batch used for
    the adaptation step and ``hess_batch_size`` the Hessian batch.  ``None``
    falls back to ``batch_size``.
    """

    eta: float
    alpha: float
    hvp_mode: str = "first_order"
    delta: float = 1e-4
    batch_size: int = 1
    inner_batch_size: int | None = None
    hess_batch_size: int | None = None

    option = "B"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.hvp_mode not in HVP_MODES:
            raise ValueError(f"hvp_mode must be one of {HVP_MODES}")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        for size in (self.batch_size, self.sizes[1], self.sizes[2]):
            if size < 1:
                raise ValueError("batch sizes must be >= 1")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.batch_size,
                self.inner_batch_size or self.batch_size,
                self.hess_batch_size or self.batch_size)


@dataclass(frozen=True)
class OptionC:
    """Moreau-envelope personalization with an inexact inner prox solve.

    The inner loop stops when the prox-gradient norm drops to ``nu`` or after
    ``max_steps`` iterations, whichever comes first (at least one of the two
    must be set).  ``inner_stepsize`` defaults to ``1 / lam``, the classical
    ``2 / (mu + L)`` step for a ``(lam - L)``-strongly convex,
    ``(lam + L)``-smooth subproblem.
    """

    eta: float
    lam: float
    nu: float | None = 1e-10
    max_steps: int | None = None
    inner_stepsize: float | None = None
    batch_size: int = 1

    option = "C"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if self.nu is None and self.max_steps is None:
            raise ValueError("need a tolerance nu, a step cap max_steps, or both")
        if self.nu is not None and not self.nu > 0:
            raise ValueError("nu must be > 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def stepsize(self) -> float:
        return self.inner_stepsize if self.inner_stepsize is not None else 1.0 / self.lam


UpdateRule = Union[OptionA, OptionB, OptionC]


def rule_to_dict(rule: UpdateRule) -> dict:
    d = asdict(rule)
    d["option"] = rule.option
    return d


def rule_from_dict(d: dict) -> UpdateRule:
    d = dict(d)
    opt = d.pop("option")
    cls = {"A": OptionA, "B": OptionB, "C": OptionC}[opt]
    return cls(**d)


@dataclass
class GradEstimate:
    vector: np.ndarray
    batches_consumed: int
    inner_steps: int = 0
    residual: float = 0.0  # achieved prox-gradient norm (Option C), the effective nu


# -- Option A ---------------------------------------------------------------

def grad_option_a(task: ClientTask, w: np.ndarray, batch: DataBatch) -> GradEstimate:
    return GradEstimate(task.batch_grad(w, batch), 1)


# -- Option B ---------------------------------------------------------------

def maml_full_grad(task: ClientTask, w: np.ndarray, alpha: float) -> np.ndarray:
    """``[I - alpha H(w)] grad f(w - alpha grad f(w))`` with population quantities."""
    g = task.grad(w)
    if alpha == 0:
        return g
    g_adapt = task.grad(w - alpha * g)
    return check_finite(g_adapt - alpha * task.hvp(w, g_adapt), "MAML gradient")


def maml_objective(task: ClientTask, w: np.ndarray, alpha: float) -> float:
    return task.loss(w - alpha * task.grad(w))


def hvp_estimate(task: ClientTask, w: np.ndarray, u: np.ndarray, batch: DataBatch,
                 mode: str, delta: float) -> np.ndarray:
    if mode == "exact":
        return task.batch_hvp(w, u, batch)
    if mode == "first_order":
        if not delta > 0:
            raise ValueError("delta must be > 0")
        step = delta / (1.0 + float(np.linalg.norm(u)))
        diff = task.batch_grad(w + step * u, batch) - task.batch_grad(w - step * u, batch)
        return check_finite(diff / (2.0 * step), "first-order hvp")
    raise ValueError(f"no HVP for mode {mode!r}")


def maml_batch_grad(task: ClientTask, w: np.ndarray, alpha: float, batch: DataBatch,
                    batch_inner: DataBatch, batch_hess: DataBatch,
                    hvp_mode: str = "exact", delta: float = 1e-4) -> np.ndarray:
    """MAML gradient estimate on fixed batches (outer, adaptation, Hessian)."""
    g_inner = task.batch_grad(w, batch_inner)
    g = task.batch_grad(w - alpha * g_inner, batch)
    if hvp_mode == "dropped":
        return g
    return check_finite(g - alpha * hvp_estimate(task, w, g, batch_hess, hvp_mode, delta), "MAML estimate")


def maml_stoch_grad(task: ClientTask, w: np.ndarray, rule: OptionB, streams: ClientStreams) -> GradEstimate:
    b, b_in, b_h = rule.sizes
    batch = task.sample_batch(b, streams.batch)
    batch_inner = task.sample_batch(b_in, streams.inner)
    batch_hess = task.sample_batch(b_h, streams.hess)
    vec = maml_batch_grad(task, w, rule.alpha, batch, batch_inner, batch_hess, rule.hvp_mode, rule.delta)
    return GradEstimate(vec, 3)


# -- Option C ---------------------------------------------------------------

def _prox_descent(grad_fn, w, lam, step, nu, max_steps, z0=None):
    """Gradient descent on ``h(theta) = f(theta) + lam/2 ||theta - w||^2``.

    Iterates on the displacement ``z = theta - w`` so that ``lam * z`` stays
    accurate for very large ``lam``.  Returns ``(z, residual, steps)``.
    """
    z = np.zeros_like(w) if z0 is None else z0.copy()
    r = grad_fn(w + z) + lam * z
    res = float(np.linalg.norm(r))
    start = res
    steps = 0
    while True:
        if nu is not None and res <= nu:
            break
        if max_steps is not None and steps >= max_steps:
            break
        z = z - step * r
        r = grad_fn(w + z) + lam * z
        new_res = float(np.linalg.norm(r))
        steps += 1
        if not math.isfinite(new_res) or new_res > 1e6 * (start + 1.0):
            raise InnerSolverError("prox inner loop diverged; inner stepsize too large for lam + L")
        if max_steps is None and steps >= 100_000:
            raise InnerSolverError(f"prox inner loop did not reach nu={nu} (residual {new_res:.3e})")
        if max_steps is None and new_res >= res and steps > 50:
            # stalled at rounding level: best achievable accuracy
            res = new_res
            break
        res = new_res
    return z, res, steps


def moreau_prox_exact(task: ClientTask, w: np.ndarray, lam: float) -> np.ndarray:
    """Exact minimizer of ``f(theta) + lam/2 ||theta - w||^2``."""
    if not lam > task.smoothness:
        raise ValueError(f"lam={lam} must exceed the smoothness constant L={task.smoothness:.6g}")
    if task.kind == "quadratic":
        M = task.H + lam * np.eye(task.dim)
        return check_finite(np.linalg.solve(M, task.c + lam * w), "prox point")
    z, res, _ = _prox_descent(task.grad, w, lam, 1.0 / lam, 1e-10, None)
    if res > 1e-10:
        raise InnerSolverError(f"prox solve stalled at residual {res:.3e}")
    return w + z


def moreau_grad_exact(task: ClientTask, w: np.ndarray, lam: float) -> np.ndarray:
    """``lam * (w - prox(w))``."""
    return check_finite(lam * (w - moreau_prox_exact(task, w, lam)), "Moreau gradient")


def moreau_envelope(task: ClientTask, w: np.ndarray, lam: float) -> float:
    theta = moreau_prox_exact(task, w, lam)
    return task.loss(theta) + 0.5 * lam * float((theta - w) @ (theta - w))


def moreau_batch_prox(task: ClientTask, w: np.ndarray, lam: float, batch: DataBatch) -> np.ndarray:
    """Exact prox of the batch loss (linear solve for quadratic tasks)."""
    if task.kind == "quadratic":
        M = task.H + lam * np.eye(task.dim)
        return np.linalg.solve(M, task.c - batch.samples.mean(axis=0) + lam * w)
    z, _, _ = _prox_descent(lambda th: task.batch_grad(th, batch), w, lam, 1.0 / lam, 1e-12, None)
    return w + z


def moreau_batch_envelope(task: ClientTask, w: np.ndarray, lam: float, batch: DataBatch) -> float:
    theta = moreau_batch_prox(task, w, lam, batch)
    return task.batch_loss(theta, batch) + 0.5 * lam * float((theta - w) @ (theta - w))


def moreau_batch_grad(task: ClientTask, w: np.ndarray, lam: float, batch: DataBatch, *,
                      nu: float | None = 1e-10, max_steps: int | None = None,
                      stepsize: float | None = None, theta0: np.ndarray | None = None) -> GradEstimate:
    """Inexact prox on a fixed batch; returns ``lam * (w - theta_tilde)``."""
    step = stepsize if stepsize is not None else 1.0 / lam
    z0 = None if theta0 is None else theta0 - w
    z, res, steps = _prox_descent(lambda th: task.batch_grad(th, batch), w, lam, step, nu, max_steps, z0)
    return GradEstimate(check_finite(-lam * z, "Moreau estimate"), 1, steps, res)


def moreau_grad_stoch(task: ClientTask, w: np.ndarray, rule: OptionC, streams: ClientStreams) -> GradEstimate:
    batch = task.sample_batch(rule.batch_size, streams.batch)
    return moreau_batch_grad(task, w, rule.lam, batch, nu=rule.nu, max_steps=rule.max_steps,
                             stepsize=rule.stepsize)


# -- dispatch ---------------------------------------------------------------

def estimate(task: ClientTask, w: np.ndarray, rule: UpdateRule, streams: ClientStreams) -> GradEstimate:
    """Draw the batches the rule needs and return its gradient estimate at ``w``."""
    if isinstance(rule, OptionA):
        return grad_option_a(task, w, task.sample_batch(rule.batch_size, streams.batch))
    if isinstance(rule, OptionB):
        return maml_stoch_grad(task, w, rule, streams)
    if isinstance(rule, OptionC):
        return moreau_grad_stoch(task, w, rule, streams)
    raise TypeError(f"unknown update rule {rule!r}")


def full_grad(task: ClientTask, w: np.ndarray, rule: UpdateRule) -> np.ndarray:
    """Exact gradient of the objective ``rule`` optimizes for one client."""
    if isinstance(rule, OptionA):
        return task.grad(w)
    if isinstance(rule, OptionB):
        return maml_full_grad(task, w, rule.alpha)
    return moreau_grad_exact(task, w, rule.lam)


def objective_value(task: ClientTask, w: np.ndarray, rule: UpdateRule) -> float:
    if isinstance(rule, OptionA):
        return task.loss(w)
    if isinstance(rule, OptionB):
        return maml_objective(task, w, rule.alpha)
    return moreau_envelope(task, w, rule.lam)


class FleetObjective:
    """Global objective ``(1/n) sum_i F_i`` for a rule; vectorized for quadratic fleets."""

    def __init__(self, fleet: Sequence[ClientTask], rule: UpdateRule):
        self.fleet = list(fleet)
        self.rule = rule
        self.n = len(self.fleet)
        self._quad = all(t.kind == "quadratic" for t in self.fleet)
        if self._quad:
            self.H = np.stack([t.H for t in self.fleet])
            self.c = np.stack([t.c for t in self.fleet])
            self.A = [t.A for t in self.fleet]
            self.bvec = [t.b for t in self.fleet]
            d = self.H.shape[1]
            if isinstance(rule, OptionC):
                eye = np.eye(d)
                for t in self.fleet:
                    if not rule.lam > t.smoothness:
                        raise ValueError("lam must exceed the smoothness constant L")
                self.Minv = np.stack([np.linalg.inv(H + rule.lam * eye) for H in self.H])
            self._hbar = self.H.mean(axis=0)
            self._cbar = self.c.mean(axis=0)
            self._consts = np.array([b @ b / (2 * len(b)) for b in self.bvec])
            self._const = float(self._consts.mean())
            self._shared = all(np.array_equal(self.H[0], H) for H in self.H[1:])

    def client_grads(self, w: np.ndarray) -> np.ndarray:
        if not self._quad:
            return np.stack([full_grad(t, w, self.rule) for t in self.fleet])
        rule = self.rule
        g = self.H @ w - self.c
        if isinstance(rule, OptionA):
            return g
        if isinstance(rule, OptionB):
            a = rule.alpha
            wa = w[None, :] - a * g
            ga = np.einsum("nij,nj->ni", self.H, wa) - self.c
            return ga - a * np.einsum("nij,nj->ni", self.H, ga)
        theta = np.einsum("nij,nj->ni", self.Minv, self.c + rule.lam * w[None, :])
        return rule.lam * (w[None, :] - theta)

    def grad(self, w: np.ndarray) -> np.ndarray:
        if self._quad and isinstance(self.rule, OptionA):
            return self._hbar @ w - self._cbar
        return self.client_grads(w).mean(axis=0)

    def client_losses(self, w: np.ndarray) -> np.ndarray:
        if not self._quad:
            return np.array([objective_value(t, w, self.rule) for t in self.fleet])
        rule = self.rule
        if isinstance(rule, OptionA):
            pts = np.broadcast_to(w, self.c.shape)
            extra = 0.0
        elif isinstance(rule, OptionB):
            pts = w[None, :] - rule.alpha * (self.H @ w - self.c)
            extra = 0.0
        else:
            pts = np.einsum("nij,nj->ni", self.Minv, self.c + rule.lam * w[None, :])
            extra = 0.5 * rule.lam * np.sum((pts - w[None, :]) ** 2, axis=1)
        quad = 0.5 * np.einsum("ni,nij,nj->n", pts, self.H, pts)
        return quad - np.einsum("ni,ni->n", self.c, pts) + self._consts + extra

    def loss(self, w: np.ndarray) -> float:
        if self._quad and isinstance(self.rule, OptionA):
            return 0.5 * float(w @ self._hbar @ w) - float(self._cbar @ w) + self._const
        return float(self.client_losses(w).mean())


def personalized_losses(fleet: Sequence[ClientTask], w: np.ndarray, rule: UpdateRule) -> np.ndarray:
    """Per-client loss of the model each method would deploy.

    Option A uses the shared model, Option B one adaptation step
    ``w - alpha grad f_i(w)``, Option C the prox point ``theta_i(w)``.
    """
    out = []
    for t in fleet:
        if isinstance(rule, OptionA):
            out.append(t.loss(w))
        elif isinstance(rule, OptionB):
            out.append(t.loss(w - rule.alpha * t.grad(w)))
        else:
            out.append(t.loss(moreau_prox_exact(t, w, rule.lam)))
    return np.array(out)


__all__ = [
    "OptionA", "OptionB", "OptionC", "UpdateRule", "GradEstimate", "InnerSolverError",
    "grad_option_a", "maml_full_grad", "maml_stoch_grad", "maml_batch_grad", "maml_objective",
    "moreau_prox_exact", "moreau_grad_exact", "moreau_grad_stoch", "moreau_batch_grad",
    "moreau_envelope", "moreau_batch_prox", "moreau_batch_envelope", "estimate", "full_grad",
    "objective_value", "FleetObjective", "personalized_losses", "rule_to_dict", "rule_from_dict",
    "NonFiniteError",
]
