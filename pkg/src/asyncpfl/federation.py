"""Server and client update logic, independent of any timing model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .estimators import UpdateRule, estimate
from .numerics import ClientStreams, NonFiniteError, check_finite
from .tasks import ClientTask

OVERFLOW_BOUND = 1e8


class DivergenceError(RuntimeError):
    """Raised when an iterate leaves the ``||w|| <= overflow`` region."""


@dataclass(frozen=True)
class ServerState:
    w: np.ndarray
    t: int = 0
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("server stepsize beta must be > 0")


@dataclass(frozen=True)
class LedgerRow:
    t: int
    client: int
    omega: int
    snapshot_hash: str = ""

    @property
    def staleness(self) -> int:
        return self.t - self.omega


@dataclass
class LocalRun:
    client: int
    w_start: np.ndarray
    Q: int
    rule: UpdateRule
    delta: np.ndarray
    download_step: int = 0
    batches: int = 0
    inner_steps: int = 0
    max_residual: float = 0.0
    grads: list = field(default_factory=list, repr=False)


def client_local_run(task: ClientTask, w_start: np.ndarray, rule: UpdateRule, Q: int,
                     streams: ClientStreams, download_step: int = 0,
                     overflow: float = OVERFLOW_BOUND, keep_grads: bool = False) -> LocalRun:
    """Run ``Q`` local steps ``w <- w - eta * estimate(w)`` from ``w_start``."""
    if Q < 1:
        raise ValueError("Q must be >= 1")
    w = w_start
    run = LocalRun(task.client_id, w_start, Q, rule, np.zeros_like(w_start), download_step)
    for q in range(Q):
        est = estimate(task, w, rule, streams)
        run.batches += est.batches_consumed
        run.inner_steps += est.inner_steps
        run.max_residual = max(run.max_residual, est.residual)
        if keep_grads:
            run.grads.append(est.vector)
        w = w - rule.eta * est.vector
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > overflow:
            raise DivergenceError(
                f"client {task.client_id} local iterate left the ball ||w|| <= {overflow:g} at step {q + 1}")
    run.delta = w_start - w
    return run


def server_apply(state: ServerState, delta: np.ndarray, client: int, download_step: int,
                 snapshot_hash: str = "", overflow: float = OVERFLOW_BOUND) -> tuple[ServerState, LedgerRow]:
    """Apply ``w <- w - beta * delta``; returns the new state and its ledger row."""
    check_finite(delta, "client update")
    if not 0 <= download_step <= state.t:
        raise ValueError(f"download step {download_step} outside [0, {state.t}]")
    w = state.w - state.beta * delta
    try:
        check_finite(w, "server model")
    except NonFiniteError as exc:
        raise DivergenceError(str(exc)) from exc
    if np.linalg.norm(w) > overflow:
        raise DivergenceError(f"server model left the ball ||w|| <= {overflow:g} at step {state.t + 1}")
    row = LedgerRow(state.t, client, download_step, snapshot_hash)
    return replace(state, w=w, t=state.t + 1), row


def run_fedavg_round(state: ServerState, fleet: Sequence[ClientTask], participation: Iterable[int],
                     rule: UpdateRule, Q: int, streams: Mapping[int, ClientStreams]) -> ServerState:
    """One synchronous round: every participant starts from ``state.w``; mean update applied."""
    ids = sorted(set(participation))
    if not ids:
        raise ValueError("participation set is empty")
    deltas = [client_local_run(fleet[i], state.w, rule, Q, streams[i], state.t).delta for i in ids]
    mean = deltas[0] if len(deltas) == 1 else np.mean(deltas, axis=0)
    new, _ = server_apply(state, mean, ids[0], state.t)
    return new
