"""Dense vector helpers, RNG stream discipline and finite-difference oracles.

Model parameters are plain 1-d ``float64`` numpy arrays.  Every helper that
produces a vector checks the result for NaN/Inf and raises
:class:`NonFiniteError` instead of letting it propagate silently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

FD_STEP = 1e-5

# spawn-key slot per purpose; clients use their own id, server-side draws use SERVER
PURPOSES = {
    "batch": 0,
    "inner": 1,
    "hess": 2,
    "delay": 3,
    "participation": 4,
    "fleet": 5,
    "probe": 6,
}
SERVER = 2**31 - 1


class NonFiniteError(ArithmeticError):
    pass


class DimensionError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} has non-finite entries")
    return x


def as_param(values, dim: int | None = None) -> np.ndarray:
    """Copy ``values`` into a finite 1-d float64 array (optionally of length ``dim``)."""
    w = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and w.shape[0] != dim:
        raise DimensionError(f"expected length {dim}, got {w.shape[0]}")
    return check_finite(w, "parameter")


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y``."""
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch {x.shape} vs {y.shape}")
    return check_finite(a * x + y, "axpy result")


def fd_gradient(f: Callable[[np.ndarray], float], w: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the scalar field ``f`` at ``w``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    w = np.asarray(w, dtype=np.float64)
    g = np.empty_like(w)
    e = np.zeros_like(w)
    for j in range(w.shape[0]):
        e[j] = h
        fp = f(w + e)
        fm = f(w - e)
        e[j] = 0.0
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {j}")
        g[j] = (fp - fm) / (2.0 * h)
    return g


def fd_jacobian_vector(grad: Callable[[np.ndarray], np.ndarray], w: np.ndarray, v: np.ndarray,
                       h: float = 1e-4) -> np.ndarray:
    """Symmetric difference of a gradient field along ``v``: an HVP oracle."""
    out = (grad(w + h * v) - grad(w - h * v)) / (2.0 * h)
    return check_finite(out, "directional difference")


def rel_error(g: np.ndarray, ref: np.ndarray) -> float:
    """Error measure used by every gradient check: ||g - ref|| / (1 + ||g||)."""
    return float(np.linalg.norm(g - ref) / (1.0 + np.linalg.norm(g)))


def vector_hash(w: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(w, dtype=np.float64).tobytes()).hexdigest()


@dataclass(frozen=True)
class SeededRng:
    """Factory for counter-based (Philox) streams keyed by (seed, owner, purpose).

    Streams for different owners never overlap, and drawing from one client's
    stream leaves every other client's sample path untouched.
    """

    seed: int

    def stream(self, owner: int, purpose: str) -> np.random.Generator:
        if owner < 0:
            raise ValueError("stream owner must be non-negative")
        ss = np.random.SeedSequence(self.seed, spawn_key=(owner, PURPOSES[purpose]))
        return np.random.Generator(np.random.Philox(ss))

    def client(self, client_id: int) -> "ClientStreams":
        return ClientStreams(
            batch=self.stream(client_id, "batch"),
            inner=self.stream(client_id, "inner"),
            hess=self.stream(client_id, "hess"),
        )


@dataclass
class ClientStreams:
    """The three sampling streams one client owns.

    ``batch`` feeds the main batch of every option, so a MAML run with zero
    adaptation step consumes exactly the same main-batch samples as plain SGD.
    """

    batch: np.random.Generator
    inner: np.random.Generator
    hess: np.random.Generator
