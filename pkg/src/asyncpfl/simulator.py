"""Discrete-event simulation of asynchronous and synchronous federated schedules.

Local computation takes zero simulated time; only download and upload
delays advance the clock.  A client counts as *active* while it holds a
downloaded model that has not yet reached the server (local work plus the
upload), and as *idle* while it waits for the server's model to arrive.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimators import FleetObjective, UpdateRule
from .federation import (DivergenceError, LedgerRow, ServerState, client_local_run, server_apply)
from .numerics import SERVER, SeededRng, vector_hash
from .tasks import ClientTask

# event kinds double as tie-break ranks: arrivals first, then downloads, then the stop marker
UPLOAD, DOWNLOAD, STOP = 0, 1, 2
KIND_NAMES = {UPLOAD: "upload-arrive", DOWNLOAD: "download-complete", STOP: "horizon-stop"}


class EventQueueExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayDist:
    """``constant`` (a), ``uniform`` [a, b] or ``exponential`` (mean a)."""

    kind: str
    a: float
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "exponential"):
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.a < 0 or (self.kind == "uniform" and not self.a <= self.b):
            raise ValueError(f"invalid delay parameters {self}")
        if self.kind == "exponential" and self.a <= 0:
            raise ValueError("exponential mean must be > 0")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.a)
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        return float(rng.exponential(self.a))

    @property
    def mean(self) -> float:
        return (self.a + self.b) / 2 if self.kind == "uniform" else self.a

    @property
    def lo(self) -> float:
        return 0.0 if self.kind == "exponential" else self.a

    @property
    def hi(self) -> float:
        return {"constant": self.a, "uniform": self.b}.get(self.kind, math.inf)

    def scaled(self, factor: float) -> "DelayDist":
        return DelayDist(self.kind, self.a * factor, self.b * factor)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class DelayModel:
    download: tuple
    upload: tuple

    def __post_init__(self):
        if len(self.download) != len(self.upload):
            raise ValueError("download and upload lists differ in length")

    @property
    def n(self) -> int:
        return len(self.download)

    @classmethod
    def constant(cls, n: int, download: float, upload: float) -> "DelayModel":
        return cls(tuple(DelayDist("constant", download) for _ in range(n)),
                   tuple(DelayDist("constant", upload) for _ in range(n)))

    @classmethod
    def uniform(cls, n: int, download=(0.5, 1.5), upload=(4.0, 6.0)) -> "DelayModel":
        return cls(tuple(DelayDist("uniform", *download) for _ in range(n)),
                   tuple(DelayDist("uniform", *upload) for _ in range(n)))

    @classmethod
    def exponential(cls, n: int, download: float = 1.0, upload: float = 5.0) -> "DelayModel":
        return cls(tuple(DelayDist("exponential", download) for _ in range(n)),
                   tuple(DelayDist("exponential", upload) for _ in range(n)))

    @classmethod
    def heterogeneous(cls, n: int, rng: np.random.Generator, ratio=(4.0, 6.0), speed=(0.5, 1.5),
                      spread: float = 0.5) -> "DelayModel":
        """Per-client speeds; each client's mean upload is ``ratio`` times its mean download.

        Client ``i`` gets a mean download ``m_i ~ U(speed)`` and ratio
        ``r_i ~ U(ratio)``; both delays are uniform within ``+-spread`` of
        their mean.
        """
        down, up = [], []
        for _ in range(n):
            m = float(rng.uniform(*speed))
            r = float(rng.uniform(*ratio))
            down.append(DelayDist("uniform", m * (1 - spread), m * (1 + spread)))
            up.append(DelayDist("uniform", r * m * (1 - spread), r * m * (1 + spread)))
        return cls(tuple(down), tuple(up))

    def scaled(self, download: float = 1.0, upload: float = 1.0) -> "DelayModel":
        return DelayModel(tuple(d.scaled(download) for d in self.download),
                          tuple(u.scaled(upload) for u in self.upload))

    def to_dict(self) -> dict:
        return {"download": [d.to_dict() for d in self.download],
                "upload": [u.to_dict() for u in self.upload]}

    @classmethod
    def from_dict(cls, d: dict) -> "DelayModel":
        return cls(tuple(DelayDist(**x) for x in d["download"]), tuple(DelayDist(**x) for x in d["upload"]))


def staleness_bound(delays: DelayModel) -> float:
    """Upper bound on ``t - Omega(t)`` from the delay supports.

    An update from client ``i`` is overtaken only by arrivals during its
    upload (length <= ``hi(up_i)``); client ``j`` arrives at most
    ``floor(len / rt_min_j) + 1`` times in such a window.
    """
    n = delays.n
    rt_min = [d.lo + u.lo for d, u in zip(delays.download, delays.upload)]
    worst = 0.0
    for i in range(n):
        window = delays.upload[i].hi
        if math.isinf(window):
            return math.inf
        total = 0.0
        for j in range(n):
            if j == i:
                continue
            if rt_min[j] <= 0:
                return math.inf
            total += math.floor(window / rt_min[j]) + 1
        worst = max(worst, total)
    return worst


@dataclass(frozen=True)
class Horizon:
    steps: int | None = None
    time: float | None = None

    def __post_init__(self):
        if self.steps is None and self.time is None:
            raise ValueError("horizon needs steps or time")
        if self.steps is not None and self.steps < 1:
            raise ValueError("horizon steps must be positive")
        if self.time is not None and not self.time > 0:
            raise ValueError("horizon time must be positive")


@dataclass
class ConcurrencyTrace:
    """Piecewise-constant count of active clients; ``active[k]`` holds on ``[times[k], times[k+1])``."""

    n: int
    mode: str
    times: list = field(default_factory=lambda: [0.0])
    active: list = field(default_factory=lambda: [0])

    def record(self, time: float, active: int) -> None:
        if not 0 <= active <= self.n:
            raise AssertionError(f"active count {active} outside [0, {self.n}]")
        if time == self.times[-1]:
            self.active[-1] = active
        else:
            self.times.append(time)
            self.active.append(active)

    def time_average(self, end: float | None = None) -> float:
        """Time-averaged fraction of active clients over ``[0, end]``."""
        t = np.asarray(self.times)
        a = np.asarray(self.active, dtype=float)
        end = t[-1] if end is None else end
        if end <= 0:
            return 0.0
        edges = np.append(t, end)
        widths = np.clip(np.minimum(edges[1:], end) - np.minimum(edges[:-1], end), 0, None)
        return float(np.sum(widths * a) / (end * self.n))

    def ratio_at(self, time: float) -> float:
        k = int(np.searchsorted(self.times, time, side="right")) - 1
        return self.active[max(k, 0)] / self.n


METRIC_COLUMNS = ("step", "time", "grad_norm_sq", "loss", "staleness", "active_ratio")


@dataclass
class RunLog:
    mode: str
    n: int
    metrics: dict = field(default_factory=lambda: {k: [] for k in METRIC_COLUMNS})
    ledger: list = field(default_factory=list)
    history_hashes: list = field(default_factory=list)
    concurrency: ConcurrencyTrace | None = None
    events: list = field(default_factory=list)
    w_final: np.ndarray | None = None
    end_time: float = 0.0
    diverged: bool = False
    error: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def tau_observed(self) -> int:
        return max((r.staleness for r in self.ledger), default=0)

    @property
    def steps(self) -> int:
        return len(self.history_hashes) - 1

    def add_metric(self, **row) -> None:
        for k in METRIC_COLUMNS:
            self.metrics[k].append(row[k])

    def running_average(self) -> np.ndarray:
        """``(1/t) sum_{s<t} ||grad F(w^s)||^2`` for ``t = 1..T``."""
        g = np.asarray(self.metrics["grad_norm_sq"], dtype=float)
        if self.mode == "async":
            g = g[: self.steps] if self.steps > 0 else g
        else:
            g = g[:-1] if len(g) > 1 else g
        return np.cumsum(g) / np.arange(1, len(g) + 1)

    def time_averaged_active(self) -> float:
        return self.concurrency.time_average(self.end_time) if self.concurrency else 0.0

    def arrival_tv_distance(self) -> float:
        """Total-variation distance of the arrival histogram from uniform."""
        counts = np.bincount([r.client for r in self.ledger], minlength=self.n).astype(float)
        if counts.sum() == 0:
            return 0.0
        return 0.5 * float(np.abs(counts / counts.sum() - 1.0 / self.n).sum())

    def summary(self) -> dict:
        m = self.metrics
        return {
            "mode": self.mode,
            "n": self.n,
            "steps": self.steps,
            "end_time": self.end_time,
            "tau_observed": self.tau_observed,
            "time_averaged_active": self.time_averaged_active(),
            "arrival_tv_distance": self.arrival_tv_distance(),
            "final_grad_norm_sq": m["grad_norm_sq"][-1] if m["grad_norm_sq"] else None,
            "final_loss": m["loss"][-1] if m["loss"] else None,
            "running_average_final": float(self.running_average()[-1]) if m["grad_norm_sq"] else None,
            "diverged": self.diverged,
            "error": self.error,
        }


def _initial(fleet, w0):
    return np.zeros(fleet[0].dim) if w0 is None else np.array(w0, dtype=np.float64)


def simulate_async(fleet: Sequence[ClientTask], rule: UpdateRule, Q: int, beta: float, delays: DelayModel,
                   horizon: Horizon, rng: SeededRng, w0: np.ndarray | None = None,
                   track_metrics: bool = True, keep_events: bool = False) -> RunLog:
    """Event loop: download -> Q local steps -> upload -> server update -> repeat.

    Ties are ordered by (time, arrivals before downloads, client id).  A
    client reads the server model when its download *completes*.
    """
    n = len(fleet)
    if delays.n != n:
        raise ValueError("delay model and fleet disagree on n")
    objective = FleetObjective(fleet, rule) if track_metrics else None
    state = ServerState(_initial(fleet, w0), 0, beta)
    log = RunLog("async", n, concurrency=ConcurrencyTrace(n, "async"))
    log.history_hashes.append(vector_hash(state.w))
    streams = [rng.client(i) for i in range(n)]
    delay_rng = [rng.stream(i, "delay") for i in range(n)]

    def emit(time, staleness, active):
        if objective is not None:
            g = objective.grad(state.w)
            log.add_metric(step=state.t, time=time, grad_norm_sq=float(g @ g), loss=objective.loss(state.w),
                           staleness=staleness, active_ratio=active / n)
        else:
            log.add_metric(step=state.t, time=time, grad_norm_sq=math.nan, loss=math.nan,
                           staleness=staleness, active_ratio=active / n)

    heap: list = []
    for i in range(n):
        heapq.heappush(heap, (fleet_delay(delays.download[i], delay_rng[i]), DOWNLOAD, i))
    if horizon.time is not None:
        heapq.heappush(heap, (float(horizon.time), STOP, -1))
    pending: dict = {}
    active = 0
    now = 0.0
    emit(0.0, 0, 0)
    try:
        while True:
            if not heap:
                raise EventQueueExhausted("no events left before the horizon")
            now, kind, i = heapq.heappop(heap)
            if keep_events:
                log.events.append((now, KIND_NAMES[kind], i))
            if kind == STOP:
                break
            if kind == DOWNLOAD:
                snapshot = state.w
                run = client_local_run(fleet[i], snapshot, rule, Q, streams[i], state.t)
                pending[i] = (run.delta, state.t, vector_hash(run.w_start))
                active += 1
                log.concurrency.record(now, active)
                heapq.heappush(heap, (now + fleet_delay(delays.upload[i], delay_rng[i]), UPLOAD, i))
            else:
                delta, omega, h = pending.pop(i)
                state, row = server_apply(state, delta, i, omega, h)
                log.ledger.append(row)
                log.history_hashes.append(vector_hash(state.w))
                active -= 1
                log.concurrency.record(now, active)
                emit(now, row.staleness, active)
                if horizon.steps is not None and state.t >= horizon.steps:
                    break
                heapq.heappush(heap, (now + fleet_delay(delays.download[i], delay_rng[i]), DOWNLOAD, i))
    except DivergenceError as exc:
        log.diverged = True
        log.error = str(exc)
    log.end_time = now
    log.w_final = state.w
    return log


def fleet_delay(dist: DelayDist, rng: np.random.Generator) -> float:
    d = dist.sample(rng)
    if d < 0:
        raise AssertionError("negative delay")
    return d


def simulate_sync(fleet: Sequence[ClientTask], rule: UpdateRule, Q: int, beta: float, delays: DelayModel,
                  participation: float, rounds: Horizon | int, rng: SeededRng,
                  w0: np.ndarray | None = None, track_metrics: bool = True) -> RunLog:
    """Synchronous rounds: sampled clients all start from ``w^t``; the round lasts
    as long as the slowest participant's download + upload."""
    n = len(fleet)
    if not 0 < participation <= 1:
        raise ValueError("participation ratio must be in (0, 1]")
    k = int(round(participation * n))
    if k < 1:
        raise ValueError("participation * n must be >= 1")
    horizon = rounds if isinstance(rounds, Horizon) else Horizon(steps=int(rounds))
    objective = FleetObjective(fleet, rule) if track_metrics else None
    state = ServerState(_initial(fleet, w0), 0, beta)
    log = RunLog("sync", n, concurrency=ConcurrencyTrace(n, "sync"))
    log.history_hashes.append(vector_hash(state.w))
    streams = [rng.client(i) for i in range(n)]
    delay_rng = [rng.stream(i, "delay") for i in range(n)]
    part_rng = rng.stream(SERVER, "participation")

    def emit(time, active):
        if objective is not None:
            g = objective.grad(state.w)
            log.add_metric(step=state.t, time=time, grad_norm_sq=float(g @ g), loss=objective.loss(state.w),
                           staleness=0, active_ratio=active / n)
        else:
            log.add_metric(step=state.t, time=time, grad_norm_sq=math.nan, loss=math.nan,
                           staleness=0, active_ratio=active / n)

    now = 0.0
    emit(0.0, 0)
    try:
        while True:
            if horizon.steps is not None and state.t >= horizon.steps:
                break
            if horizon.time is not None and now >= horizon.time:
                break
            ids = np.sort(part_rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
            changes = []
            duration = 0.0
            for j in ids:
                d = fleet_delay(delays.download[j], delay_rng[j])
                u = fleet_delay(delays.upload[j], delay_rng[j])
                if u > 0:  # a zero-length active window changes nothing
                    changes.append((now + d, 1))
                    changes.append((now + d + u, -1))
                duration = max(duration, d + u)
            # ends before starts at equal times, matching the async tie rule
            active = 0
            for time, delta in sorted(changes, key=lambda c: (c[0], c[1])):
                active += delta
                log.concurrency.record(time, active)
            w_t = state.w
            deltas = [client_local_run(fleet[j], w_t, rule, Q, streams[j], state.t).delta for j in ids]
            mean = deltas[0] if len(deltas) == 1 else np.mean(deltas, axis=0)
            h = vector_hash(w_t)
            t = state.t
            state, _ = server_apply(state, mean, int(ids[0]), t, h)
            log.ledger.extend(LedgerRow(t, int(j), t, h) for j in ids)
            log.history_hashes.append(vector_hash(state.w))
            now += duration
            emit(now, 0)
    except DivergenceError as exc:
        log.diverged = True
        log.error = str(exc)
    log.end_time = now
    log.w_final = state.w
    return log


def concurrency_report(traces: Sequence, labels: Sequence[str] | None = None) -> list[dict]:
    """Time-averaged active ratio per trace (accepts RunLogs or ConcurrencyTraces)."""
    if not traces:
        raise ValueError("need at least one trace")
    rows = []
    for k, tr in enumerate(traces):
        if isinstance(tr, RunLog):
            ratio, mode = tr.time_averaged_active(), tr.mode
        else:
            ratio, mode = tr.time_average(), tr.mode
        rows.append({"label": labels[k] if labels else str(k), "mode": mode, "time_averaged_active": ratio})
    return rows


def concurrency_csv(rows: Sequence[dict]) -> str:
    lines = ["label,mode,time_averaged_active"]
    lines += [f"{r['label']},{r['mode']},{r['time_averaged_active']!r}" for r in rows]
    return "\n".join(lines) + "\n"
