"""Experiment configuration: TOML/JSON loading, validation and a resolved JSON echo."""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .estimators import OptionA, OptionB, OptionC, UpdateRule, rule_from_dict, rule_to_dict
from .simulator import DelayModel, Horizon
from .tasks import ClientTask, make_fleet

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUT_ENV = "ASYNCPFL_OUT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


@dataclass(frozen=True)
class FleetSpec:
    kind: str = "quadratic"
    n: int = 50
    dim: int = 20
    heterogeneity: float = 1.0
    noise: float = 0.1
    rows: int | None = None
    lipschitz: float | None = None
    pool_size: int = 200
    reg: float = 0.01
    separation: float = 1.0
    seed: int = 0

    def build(self) -> list[ClientTask]:
        return make_fleet(self.kind, self.n, self.heterogeneity, self.dim, np.random.default_rng(self.seed),
                          noise=self.noise, rows=self.rows, lipschitz=self.lipschitz,
                          pool_size=self.pool_size, reg=self.reg, separation=self.separation)


@dataclass(frozen=True)
class ScheduleSpec:
    """``mode`` is ``async`` or ``sync``; delay ranges are ``[lo, hi]`` pairs (or means)."""

    mode: str = "async"
    delays: str = "uniform"
    download: tuple = (0.5, 1.5)
    upload: tuple = (4.0, 6.0)
    participation: float = 0.8
    ratio: tuple = (4.0, 6.0)
    speed: tuple = (0.5, 1.5)
    spread: float = 0.5

    def delay_model(self, n: int, seed: int) -> DelayModel:
        if self.delays == "uniform":
            return DelayModel.uniform(n, tuple(self.download), tuple(self.upload))
        if self.delays == "constant":
            return DelayModel.constant(n, _scalar(self.download), _scalar(self.upload))
        if self.delays == "exponential":
            return DelayModel.exponential(n, _scalar(self.download), _scalar(self.upload))
        return DelayModel.heterogeneous(n, np.random.default_rng(seed), tuple(self.ratio),
                                        tuple(self.speed), self.spread)


def _scalar(v) -> float:
    # a range given for a single-parameter family collapses to its mean
    return float(np.mean(v)) if isinstance(v, (list, tuple)) else float(v)


@dataclass(frozen=True)
class VerifySpec:
    probes: int = 100
    gradcheck_tol: float = 1e-4
    lemma_lams: tuple = (10.0, 20.0)
    lemma_alphas: tuple = (0.0, 0.5)
    lemma_names: tuple = ()
    bias_draws: int = 100000
    draws: int = 10000
    pairs: int = 1000
    rate_tau_factor: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    fleet: FleetSpec
    rule: dict
    schedule: ScheduleSpec = ScheduleSpec()
    Q: int = 10
    beta: float = 1.0
    steps: int | None = 1000
    time: float | None = None
    seeds: tuple = (0,)
    out: str = "runs"
    track_metrics: bool = True
    verify: VerifySpec = VerifySpec()
    name: str = ""

    def make_rule(self) -> UpdateRule:
        return rule_from_dict(self.rule)

    def horizon(self) -> Horizon:
        return Horizon(steps=self.steps, time=self.time)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def echo(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def with_out(self, out: str) -> "ExperimentConfig":
        return replace(self, out=str(out))


_RULE_DEFAULTS = {
    "A": {"eta": 0.03},
    "B": {"eta": 0.03, "alpha": 0.01},
    "C": {"eta": 0.03, "lam": 15.0, "max_steps": 10},
}


def _section(cls, raw: dict | None, path: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", "unknown field")
    for k, v in list(raw.items()):
        if isinstance(v, list):
            raw[k] = tuple(v)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _resolve_rule(raw: dict, L: float) -> dict:
    """Fill defaults, turn ``alpha_scale``/``lam_scale`` (multiples of ``1/L`` and ``L``) into values."""
    raw = dict(raw)
    opt = str(raw.pop("option", "A")).upper()
    if opt not in _RULE_DEFAULTS:
        raise ConfigError("rule.option", f"must be A, B or C, got {opt!r}")
    out = dict(_RULE_DEFAULTS[opt])
    if "alpha_scale" in raw:
        if "alpha" in raw:
            raise ConfigError("rule.alpha_scale", "give alpha or alpha_scale, not both")
        raw["alpha"] = float(raw.pop("alpha_scale")) / L
    if "lam_scale" in raw:
        if "lam" in raw:
            raise ConfigError("rule.lam_scale", "give lam or lam_scale, not both")
        raw["lam"] = float(raw.pop("lam_scale")) * L
    out.update(raw)
    cls = {"A": OptionA, "B": OptionB, "C": OptionC}[opt]
    known = {f.name for f in fields(cls)}
    extra = sorted(set(out) - known)
    if extra:
        raise ConfigError(f"rule.{extra[0]}", f"not a parameter of option {opt}")
    if opt == "B" and not out["alpha"] >= 0:
        raise ConfigError("rule.alpha", "alpha must be >= 0")
    for key in ("batch_size", "inner_batch_size", "hess_batch_size"):
        if out.get(key) is not None and int(out[key]) < 1:
            raise ConfigError(f"rule.{key}", "batch sizes must be >= 1")
    if opt == "C" and not out["lam"] > L:
        raise ConfigError("rule.lam", f"lam = {out['lam']!r} must exceed the measured smoothness L = {L!r} "
                                      "(the envelope needs kappa = lam / L > 1)")
    try:
        rule = cls(**out)
    except (TypeError, ValueError) as exc:
        raise ConfigError("rule", str(exc)) from None
    return rule_to_dict(rule)


def fleet_smoothness(fleet) -> float:
    return max(t.smoothness for t in fleet)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    raw = dict(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(extra[0], "unknown field")
    fleet = _section(FleetSpec, raw.pop("fleet", None), "fleet")
    if fleet.n < 1 or fleet.dim < 1:
        raise ConfigError("fleet", "n and dim must be >= 1")
    schedule = _section(ScheduleSpec, raw.pop("schedule", None), "schedule")
    if schedule.mode not in ("async", "sync"):
        raise ConfigError("schedule.mode", "must be 'async' or 'sync'")
    if schedule.delays not in ("uniform", "constant", "exponential", "heterogeneous"):
        raise ConfigError("schedule.delays", "must be uniform, constant, exponential or heterogeneous")
    if not 0 < schedule.participation <= 1:
        raise ConfigError("schedule.participation", "must lie in (0, 1]")
    verify = _section(VerifySpec, raw.pop("verify", None), "verify")
    try:
        tasks = fleet.build()
    except ValueError as exc:
        raise ConfigError("fleet", str(exc)) from None
    rule = _resolve_rule(raw.pop("rule", {}) or {}, fleet_smoothness(tasks))
    if "seeds" in raw:
        raw["seeds"] = tuple(int(s) for s in raw["seeds"])
        if not raw["seeds"]:
            raise ConfigError("seeds", "need at least one seed")
    try:
        cfg = ExperimentConfig(fleet=fleet, rule=rule, schedule=schedule, verify=verify, **raw)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    if int(cfg.Q) < 1:
        raise ConfigError("Q", "must be >= 1")
    if not cfg.beta > 0:
        raise ConfigError("beta", "must be > 0")
    if cfg.steps is None and cfg.time is None:
        raise ConfigError("steps", "set steps, time, or both")
    if cfg.steps is not None and cfg.steps < 1:
        raise ConfigError("steps", "must be >= 1")
    if cfg.time is not None and not cfg.time > 0:
        raise ConfigError("time", "must be > 0")
    return cfg


def parse_text(text: str, suffix: str = ".toml") -> dict:
    if suffix == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("file", f"not valid TOML: {exc}") from None


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(str(p), f"cannot read: {exc.strerror}") from None
    cfg = from_dict(parse_text(text, p.suffix.lower()))
    override = os.environ.get(OUT_ENV)
    return cfg.with_out(override) if override else cfg


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(f".{p.name}.tmp{os.getpid()}")
    with open(tmp, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, p)
