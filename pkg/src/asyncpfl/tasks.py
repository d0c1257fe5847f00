"""Synthetic heterogeneous client objectives with known constants.

Two task families are provided:

* :class:`QuadraticTask` -- ``f_i(w) = ||A_i w - b_i||^2 / (2m)`` observed through
  additive gradient noise.  A single sample is a noise vector ``xi`` with
  ``E xi = 0`` and ``E ||xi||^2 = s^2``, and the per-sample loss is
  ``f_i(w) + xi . w``.  The Hessian is constant, so every constant of the
  analysis has a closed form.
* :class:`LogisticTask` -- L2-regularised binary logistic regression over a
  fixed finite pool; population quantities are exact pool averages.  Label
  skew across clients comes from Dirichlet-distributed class priors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DimensionError, NonFiniteError, check_finite


@dataclass(frozen=True)
class DataBatch:
    """Samples drawn i.i.d. from one client's distribution.

    For quadratic tasks each row is a gradient-noise vector; for logistic
    tasks ``samples`` holds pool indices.
    """

    samples: np.ndarray

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @staticmethod
    def concat(a: "DataBatch", b: "DataBatch") -> "DataBatch":
        return DataBatch(np.concatenate([a.samples, b.samples]))


class ClientTask:
    """Common interface; concrete tasks are frozen dataclasses below."""

    kind: str
    client_id: int

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def _check_dim(self, w: np.ndarray) -> None:
        if w.shape != (self.dim,):
            raise DimensionError(f"expected shape ({self.dim},), got {w.shape}")

    def sample_batch(self, size: int, rng: np.random.Generator) -> DataBatch:
        raise NotImplementedError

    # population quantities
    def loss(self, w: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # batch quantities
    def batch_loss(self, w: np.ndarray, batch: DataBatch) -> float:
        raise NotImplementedError

    def batch_grad(self, w: np.ndarray, batch: DataBatch) -> np.ndarray:
        raise NotImplementedError

    def batch_hvp(self, w: np.ndarray, v: np.ndarray, batch: DataBatch) -> np.ndarray:
        raise NotImplementedError

    def sample_grads(self, w: np.ndarray, batch: DataBatch) -> np.ndarray:
        """Per-sample gradients, one row per sample."""
        raise NotImplementedError

    @property
    def smoothness(self) -> float:
        raise NotImplementedError

    @property
    def f_star(self) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class QuadraticTask(ClientTask):
    client_id: int
    A: np.ndarray
    b: np.ndarray
    noise: float = 0.0
    H: np.ndarray = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)
    kind = "quadratic"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise DimensionError("A and b disagree on the number of rows")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        m = A.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "H", A.T @ A / m)
        object.__setattr__(self, "c", A.T @ b / m)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def rows(self) -> int:
        return self.A.shape[0]

    @property
    def minimizer(self) -> np.ndarray:
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[-1])

    @property
    def f_star(self) -> float:
        return self.loss(self.minimizer)

    def sample_batch(self, size: int, rng: np.random.Generator) -> DataBatch:
        if size < 1:
            raise ValueError("batch size must be >= 1")
        xi = rng.standard_normal((size, self.dim))
        xi *= self.noise / math.sqrt(self.dim)
        return DataBatch(xi)

    def loss(self, w):
        r = self.A @ w - self.b
        return float(r @ r) / (2 * self.rows)

    def grad(self, w):
        self._check_dim(w)
        return check_finite(self.H @ w - self.c, "population gradient")

    def hvp(self, w, v):
        return check_finite(self.H @ v, "hvp")

    def hessian(self, w):
        return self.H.copy()

    def batch_loss(self, w, batch):
        return self.loss(w) + float(batch.samples.mean(axis=0) @ w)

    def batch_grad(self, w, batch):
        self._check_dim(w)
        return check_finite(self.H @ w - self.c + batch.samples.mean(axis=0), "batch gradient")

    def batch_hvp(self, w, v, batch):
        return check_finite(self.H @ v, "batch hvp")

    def sample_grads(self, w, batch):
        return (self.H @ w - self.c)[None, :] + batch.samples

    def to_dict(self) -> dict:
        return {"kind": self.kind, "client_id": self.client_id, "A": self.A.tolist(),
                "b": self.b.tolist(), "noise": self.noise}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class LogisticTask(ClientTask):
    """Binary logistic regression on a fixed pool ``(X, y)``, ``y`` in {-1, +1}."""

    client_id: int
    X: np.ndarray
    y: np.ndarray
    reg: float = 0.01
    prior: tuple = (0.5, 0.5)
    kind = "logistic"

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise DimensionError("X and y disagree on the pool size")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "prior", tuple(float(p) for p in self.prior))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def pool_size(self) -> int:
        return self.X.shape[0]

    @property
    def smoothness(self) -> float:
        # sigma' <= 1/4
        return float(np.linalg.eigvalsh(self.X.T @ self.X / self.pool_size)[-1]) / 4 + self.reg

    @property
    def f_star(self) -> float:
        return self.loss(self.minimizer)

    @property
    def minimizer(self) -> np.ndarray:
        # Newton on a strongly convex objective (reg > 0)
        w = np.zeros(self.dim)
        for _ in range(100):
            g = self.grad(w)
            if np.linalg.norm(g) < 1e-12:
                break
            w = w - np.linalg.solve(self.hessian(w), g)
        return w

    def sample_batch(self, size, rng):
        if size < 1:
            raise ValueError("batch size must be >= 1")
        return DataBatch(rng.integers(0, self.pool_size, size=size))

    def _loss_idx(self, w, X, y):
        margins = y * (X @ w)
        return float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * self.reg * float(w @ w)

    def _grad_idx(self, w, X, y):
        margins = y * (X @ w)
        coef = -y * _sigmoid(-margins)
        return X.T @ coef / X.shape[0] + self.reg * w

    def _hvp_idx(self, w, v, X):
        s = _sigmoid(X @ w)
        return X.T @ (s * (1 - s) * (X @ v)) / X.shape[0] + self.reg * v

    def loss(self, w):
        return self._loss_idx(w, self.X, self.y)

    def grad(self, w):
        self._check_dim(w)
        return check_finite(self._grad_idx(w, self.X, self.y), "population gradient")

    def hvp(self, w, v):
        return check_finite(self._hvp_idx(w, v, self.X), "hvp")

    def hessian(self, w):
        s = _sigmoid(self.X @ w)
        return (self.X.T * (s * (1 - s))) @ self.X / self.pool_size + self.reg * np.eye(self.dim)

    def batch_loss(self, w, batch):
        idx = batch.samples
        return self._loss_idx(w, self.X[idx], self.y[idx])

    def batch_grad(self, w, batch):
        self._check_dim(w)
        idx = batch.samples
        return check_finite(self._grad_idx(w, self.X[idx], self.y[idx]), "batch gradient")

    def batch_hvp(self, w, v, batch):
        return check_finite(self._hvp_idx(w, v, self.X[batch.samples]), "batch hvp")

    def sample_grads(self, w, batch):
        X, y = self.X[batch.samples], self.y[batch.samples]
        coef = -y * _sigmoid(-y * (X @ w))
        return X * coef[:, None] + self.reg * w[None, :]

    def per_sample_hessians(self, w):
        s = _sigmoid(self.X @ w)
        wts = s * (1 - s)
        return wts[:, None, None] * self.X[:, :, None] * self.X[:, None, :] + self.reg * np.eye(self.dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "client_id": self.client_id, "X": self.X.tolist(),
                "y": self.y.tolist(), "reg": self.reg, "prior": list(self.prior)}


# -- module-level wrappers --------------------------------------------------

def sample_batch(task: ClientTask, size: int, rng: np.random.Generator) -> DataBatch:
    return task.sample_batch(size, rng)


def batch_grad(task: ClientTask, w: np.ndarray, batch: DataBatch) -> np.ndarray:
    return task.batch_grad(w, batch)


def batch_hvp(task: ClientTask, w: np.ndarray, v: np.ndarray, batch: DataBatch) -> np.ndarray:
    return task.batch_hvp(w, v, batch)


def population_grad(task: ClientTask, w: np.ndarray) -> np.ndarray:
    return task.grad(w)


def population_loss(task: ClientTask, w: np.ndarray) -> float:
    val = task.loss(w)
    if not math.isfinite(val):
        raise NonFiniteError("population loss is not finite")
    return val


# -- fleets ------------------------------------------------------------------

def _unit_sphere(rng, n, d):
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def make_fleet(kind: str, n: int, heterogeneity: float, dim: int, rng: np.random.Generator, *,
               noise: float = 0.0, rows: int | None = None, lipschitz: float | None = None,
               pool_size: int = 200, reg: float = 0.01, separation: float = 1.0) -> list[ClientTask]:
    """Build ``n`` related client tasks whose spread grows with ``heterogeneity``.

    Quadratic fleets share one design matrix ``A`` (``rows x dim``, default
    ``rows = 4 * dim``) and place client minimizers at
    ``w_bar + heterogeneity * u_i`` with ``u_i`` uniform on the unit sphere.
    ``lipschitz`` rescales ``A`` so that the largest Hessian eigenvalue equals it.

    Logistic fleets draw per-client class priors from a symmetric Dirichlet with
    concentration ``1 / heterogeneity`` (balanced priors when it is 0) and
    features ``x = y * mu + N(0, I)``.
    """
    if n < 1 or dim < 1:
        raise ValueError("fleet needs n >= 1 and dim >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be non-negative")
    if kind == "quadratic":
        m = rows or 4 * dim
        if m < 1:
            raise ValueError("rows must be >= 1")
        A = rng.standard_normal((m, dim))
        if lipschitz is not None:
            top = np.linalg.eigvalsh(A.T @ A / m)[-1]
            A *= math.sqrt(lipschitz / top)
        center = rng.standard_normal(dim)
        u = _unit_sphere(rng, n, dim)
        tasks = []
        for i in range(n):
            w_i = center + heterogeneity * u[i]
            tasks.append(QuadraticTask(i, A.copy(), A @ w_i, noise))
        return tasks
    if kind == "logistic":
        mu = rng.standard_normal(dim)
        mu *= separation / np.linalg.norm(mu)
        tasks = []
        for i in range(n):
            if heterogeneity == 0:
                prior = np.array([0.5, 0.5])
            else:
                prior = rng.dirichlet([1.0 / heterogeneity] * 2)
            # keep both classes present so the pool minimizer is well defined
            prior = np.clip(prior, 0.02, 0.98)
            prior = prior / prior.sum()
            y = np.where(rng.random(pool_size) < prior[1], 1.0, -1.0)
            X = y[:, None] * mu[None, :] + rng.standard_normal((pool_size, dim))
            tasks.append(LogisticTask(i, X, y, reg, tuple(prior)))
        return tasks
    raise ValueError(f"unknown task kind {kind!r}")


def dispersion_formula(fleet: Sequence[QuadraticTask], heterogeneity: float) -> float:
    """Expected squared gradient diversity of a generated quadratic fleet.

    With a shared Hessian ``H`` and minimizer offsets ``h u_i`` (``u_i`` uniform
    on the sphere) the expectation of ``(1/n) sum ||H(u_i - u_bar)||^2 h^2`` is
    ``h^2 (1 - 1/n) tr(H^2) / d``.
    """
    H = fleet[0].H
    n, d = len(fleet), fleet[0].dim
    return heterogeneity**2 * (1 - 1 / n) * float(np.trace(H @ H)) / d


def global_minimizer(fleet: Sequence[ClientTask]) -> np.ndarray:
    if all(t.kind == "quadratic" for t in fleet):
        H = sum(t.H for t in fleet) / len(fleet)
        c = sum(t.c for t in fleet) / len(fleet)
        return np.linalg.lstsq(H, c, rcond=None)[0]
    w = np.zeros(fleet[0].dim)
    for _ in range(100):
        g = sum(t.grad(w) for t in fleet) / len(fleet)
        if np.linalg.norm(g) < 1e-12:
            break
        Hs = sum(t.hessian(w) for t in fleet) / len(fleet)
        w = w - np.linalg.solve(Hs, g)
    return w


def diversity(fleet: Sequence[ClientTask], w: np.ndarray) -> float:
    """``(1/n) sum_i ||grad f_i(w) - grad f(w)||^2``."""
    G = np.stack([t.grad(w) for t in fleet])
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))


def shared_hessian(fleet: Sequence[ClientTask]) -> bool:
    if not all(t.kind == "quadratic" for t in fleet):
        return False
    H0 = fleet[0].H
    return all(np.array_equal(t.H, H0) for t in fleet[1:])


# -- constants ---------------------------------------------------------------

@dataclass
class TaskConstants:
    """Constants of the smoothness / variance / diversity assumptions.

    ``provenance`` maps each field name to ``"analytic"`` or ``"estimated"``.
    ``G`` is ``inf`` whenever the gradient is unbounded on the whole space.
    """

    L: float
    sigma_g: float
    gamma_g: float
    G: float
    rho: float
    sigma_h: float
    gamma_h: float
    f_star: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: _jsonable(getattr(self, k)) for k in
               ("L", "sigma_g", "gamma_g", "G", "rho", "sigma_h", "gamma_h", "f_star")}
        out["provenance"] = dict(self.provenance)
        return out


def _jsonable(x: float):
    return x if math.isfinite(x) else str(x)


def probe_points(center: np.ndarray, radius: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the ball ``||w - center|| <= radius``."""
    d = center.shape[0]
    u = _unit_sphere(rng, count, d)
    r = radius * rng.random(count) ** (1.0 / d)
    return center[None, :] + u * r[:, None]


def default_probe_radius(fleet: Sequence[ClientTask]) -> float:
    """10x the RMS distance of client minimizers from the global minimizer (1.0 if zero)."""
    w_bar = global_minimizer(fleet)
    spread = math.sqrt(np.mean([np.sum((t.minimizer - w_bar) ** 2) for t in fleet]))
    return 10.0 * spread if spread > 1e-12 else 1.0


def measure_constants(fleet: Sequence[ClientTask], probe_count: int = 100,
                      rng: np.random.Generator | None = None, radius: float | None = None) -> TaskConstants:
    """Closed-form constants where they exist, Monte-Carlo/probe maxima otherwise."""
    if probe_count < 100:
        raise ValueError("probe_count must be >= 100")
    rng = rng if rng is not None else np.random.default_rng(0)
    center = global_minimizer(fleet)
    radius = radius if radius is not None else default_probe_radius(fleet)
    probes = probe_points(center, radius, probe_count, rng)
    f_star = min(t.f_star for t in fleet)

    if all(t.kind == "quadratic" for t in fleet):
        L = max(t.smoothness for t in fleet)
        sigma_g = max(t.noise for t in fleet)
        prov = {"L": "analytic", "sigma_g": "analytic", "rho": "analytic", "sigma_h": "analytic",
                "f_star": "analytic", "G": "analytic"}
        if shared_hessian(fleet):
            # diversity is constant in w when every client has the same Hessian
            gamma_g = math.sqrt(diversity(fleet, np.zeros(fleet[0].dim)))
            gamma_h = 0.0
            prov.update(gamma_g="analytic", gamma_h="analytic")
        else:
            gamma_g = math.sqrt(max(diversity(fleet, w) for w in probes))
            Hs = np.stack([t.H for t in fleet])
            gamma_h = math.sqrt(float(np.mean([np.linalg.norm(H - Hs.mean(0), 2) ** 2 for H in Hs])))
            prov.update(gamma_g="estimated", gamma_h="analytic")
        return TaskConstants(L, sigma_g, gamma_g, math.inf, 0.0, 0.0, gamma_h, f_star, prov)

    # logistic (or mixed): probe estimates
    L = 0.0
    for t in fleet:
        for w in probes[: min(10, len(probes))]:
            L = max(L, _power_iteration(lambda v: t.hvp(w, v), t.dim, rng))
    sigma2 = 0.0
    for t in fleet:
        idx = DataBatch(np.arange(t.pool_size)) if t.kind == "logistic" else None
        for w in probes[:20]:
            if idx is None:
                continue
            sg = t.sample_grads(w, idx)
            sigma2 = max(sigma2, float(np.mean(np.sum((sg - sg.mean(0)) ** 2, axis=1))))
    gamma_g = math.sqrt(max(diversity(fleet, w) for w in probes))
    rho = 0.0
    sigma_h2 = 0.0
    gamma_h2 = 0.0
    for k in range(min(20, len(probes) - 1)):
        w, u = probes[k], probes[k + 1]
        Hw = [t.hessian(w) for t in fleet]
        Hu = [t.hessian(u) for t in fleet]
        gap = np.linalg.norm(w - u)
        if gap > 0:
            rho = max(rho, max(np.linalg.norm(a - b, 2) for a, b in zip(Hw, Hu)) / gap)
        Hbar = sum(Hw) / len(Hw)
        gamma_h2 = max(gamma_h2, float(np.mean([np.linalg.norm(H - Hbar, 2) ** 2 for H in Hw])))
        if k < 5:
            for t, H in zip(fleet, Hw):
                if t.kind == "logistic":
                    dev = t.per_sample_hessians(w) - H[None]
                    # Frobenius norm upper-bounds the spectral norm
                    sigma_h2 = max(sigma_h2, float(np.mean(np.sum(dev**2, axis=(1, 2)))))
    prov = {k: "estimated" for k in ("L", "sigma_g", "gamma_g", "rho", "sigma_h", "gamma_h")}
    prov.update(G="analytic", f_star="estimated")
    return TaskConstants(L, math.sqrt(sigma2), gamma_g, math.inf, rho, math.sqrt(sigma_h2),
                         math.sqrt(gamma_h2), f_star, prov)


def _power_iteration(matvec, d, rng, iters=200):
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = matvec(v)
        lam = float(np.linalg.norm(u))
        if lam == 0:
            return 0.0
        v = u / lam
    return lam


# -- serialization ------------------------------------------------------------

def fleet_to_json(fleet: Sequence[ClientTask]) -> str:
    return json.dumps({"version": 1, "clients": [t.to_dict() for t in fleet]})


def fleet_from_json(text: str) -> list[ClientTask]:
    data = json.loads(text)
    out: list[ClientTask] = []
    for rec in data["clients"]:
        if rec["kind"] == "quadratic":
            out.append(QuadraticTask(rec["client_id"], np.array(rec["A"]), np.array(rec["b"]), rec["noise"]))
        elif rec["kind"] == "logistic":
            out.append(LogisticTask(rec["client_id"], np.array(rec["X"]), np.array(rec["y"]),
                                    rec["reg"], tuple(rec["prior"])))
        else:
            raise ValueError(f"unknown task kind {rec['kind']!r}")
    return out
