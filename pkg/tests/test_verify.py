import math

import numpy as np
import pytest

from asyncpfl.estimators import OptionA, OptionB, OptionC
from asyncpfl.numerics import SeededRng
from asyncpfl.simulator import DelayModel, Horizon, simulate_async
from asyncpfl.tasks import make_fleet, measure_constants
from asyncpfl.verify import (BOUND_NAMES, BoundReport, HorizonTooShort, LemmaParams, ProbeConfig, check_lemma,
                             fit_rate, gradcheck_suite, horizon_threshold, lemma_table, personalized_smoothness,
                             theorem_stepsize)

FAST = ProbeConfig(points=20, pairs=200, draws=2000, maml_bias_draws=2000, variance_draws=2000)


def test_bound_report_pass_flag_tracks_margin():
    assert BoundReport("x", 1.0, 1.0, 0.5, 1.0, {}).passed
    assert not BoundReport("x", 1.0, 1.1, 0.5, 1.1, {}).passed


def test_probe_config_rejects_insufficient_probes():
    with pytest.raises(ValueError):
        ProbeConfig(points=0)


def test_unknown_bound_name(quad_fleet):
    with pytest.raises(ValueError):
        check_lemma("nope", quad_fleet, LemmaParams())


def test_moreau_smoothness_margin_below_one(quad_fleet):
    L = measure_constants(quad_fleet).L
    rep = check_lemma("moreau_smoothness", quad_fleet, LemmaParams(lam=10 * L), FAST)
    assert rep.bound == pytest.approx(10 * L / 9)
    assert rep.passed and rep.margin < 1


def test_maml_bias_vanishes_at_zero_alpha(quad_fleet):
    rep = check_lemma("maml_bias", quad_fleet, LemmaParams(alpha=0.0), FAST)
    assert rep.bound == 0.0 and rep.passed


def test_moreau_diversity_homogeneous_fleet_is_zero():
    fleet = make_fleet("quadratic", 4, 0.0, 5, np.random.default_rng(0), noise=0.2)
    L = measure_constants(fleet).L
    rep = check_lemma("moreau_diversity", fleet, LemmaParams(lam=10 * L), FAST)
    assert rep.bound == pytest.approx(0.0, abs=1e-20) and rep.empirical_max == pytest.approx(0.0, abs=1e-12)
    assert rep.passed


def test_moreau_diversity_requires_lam_at_least_seven_l(quad_fleet):
    L = measure_constants(quad_fleet).L
    with pytest.raises(ValueError, match="7"):
        check_lemma("moreau_diversity", quad_fleet, LemmaParams(lam=5 * L), FAST)


def test_moreau_checks_reject_lam_below_l(quad_fleet):
    L = measure_constants(quad_fleet).L
    with pytest.raises(ValueError):
        check_lemma("moreau_bias", quad_fleet, LemmaParams(lam=0.5 * L, nu=1e-8), FAST)


@pytest.mark.parametrize("name", BOUND_NAMES)
def test_every_bound_passes_on_small_quadratic(name):
    fleet = make_fleet("quadratic", 4, 1.0, 6, np.random.default_rng(3), noise=0.4)
    L = measure_constants(fleet).L
    params = LemmaParams(alpha=0.5 / L) if name.startswith("maml") else LemmaParams(lam=10 * L, nu=1e-10,
                                                                                     max_steps=None)
    rep = check_lemma(name, fleet, params, FAST, np.random.default_rng(0))
    assert rep.passed, rep
    assert rep.constants == "analytic"
    assert name in lemma_table([rep])


def test_limit_coherence_of_maml_constants():
    L, rho, G = 2.0, 0.0, 1.0
    small = personalized_smoothness(OptionB(0.1, 1e-9), L, rho, G)
    assert small == pytest.approx(L)
    vals = [personalized_smoothness(OptionC(0.1, L * 10 ** k), L) for k in range(1, 5)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] == pytest.approx(L, rel=1e-3)


def test_horizon_thresholds_and_stepsize():
    assert horizon_threshold(OptionA(0.1), 1.0, 10, 3) == 160 * 17 * 64
    assert horizon_threshold(OptionB(0.1, 0.5), 1.0, 10, 3) == pytest.approx(64 * 2.25)
    assert horizon_threshold(OptionC(0.1, 10.0), 1.0, 10, 3) == pytest.approx(288 * 10 / 9 * 17 * 16)
    assert theorem_stepsize(OptionA(0.1), 4.0, 2, 100) == pytest.approx(1 / (2 * 20))


def test_fit_rate_refuses_short_horizon():
    curve = np.ones(100)
    with pytest.raises(HorizonTooShort) as exc:
        fit_rate(curve, 3, rule=OptionA(0.1), Q=10, L=1.0)
    assert exc.value.threshold == 160 * 17 * 64


def test_fit_rate_recovers_synthetic_coefficients():
    t = np.arange(1, 5001, dtype=float)
    fit = fit_rate(2.0 / np.sqrt(t) + 7.0 / t, 0, rule=OptionB(0.1, 0.0), Q=1, L=1.0)
    assert fit.c1 == pytest.approx(2.0) and fit.c2 == pytest.approx(7.0)


def test_deterministic_gd_rate_scale():
    fleet = make_fleet("quadratic", 1, 0.0, 5, np.random.default_rng(0), lipschitz=1.0)
    T = 2000
    eta = theorem_stepsize(OptionA(1.0), 1.0, 1, T)
    log = simulate_async(fleet, OptionA(eta), 1, 1.0, DelayModel.constant(1, 0.0, 0.0), Horizon(steps=T),
                         SeededRng(0))
    fit = fit_rate(log, log.tau_observed, rule=OptionA(eta), Q=1, L=1.0)
    scale = 4 * math.sqrt(1.0) * (fleet[0].loss(np.zeros(5)) - fleet[0].f_star)
    assert scale / 10 <= fit.c1 <= scale * 10


def test_replicate_fits_are_stable():
    fleet = make_fleet("quadratic", 5, 1.0, 5, np.random.default_rng(0), noise=0.5, lipschitz=1.0)
    fits = []
    for s in (1, 2):
        log = simulate_async(fleet, OptionA(0.01), 1, 1.0, DelayModel.uniform(5), Horizon(steps=3000),
                             SeededRng(s))
        fits.append(fit_rate(log, log.tau_observed, rule=OptionA(0.01), Q=1, L=1.0, enforce_threshold=False))
    assert abs(fits[0].c1 - fits[1].c1) <= 0.25 * abs(fits[0].c1)
    assert abs(fits[0].c2 - fits[1].c2) <= 0.25 * abs(fits[0].c2)


def test_gradcheck_suite_passes_and_names_entries(small_fleet):
    rep = gradcheck_suite(small_fleet, np.random.default_rng(0), probes=10)
    assert rep.passed
    names = [e.operation for e in rep.entries]
    assert "maml_full_grad" in names and "moreau_grad_exact" in names
    assert "PASS" in rep.table()


def test_gradcheck_reports_broken_gradient(small_fleet, monkeypatch):
    from asyncpfl.tasks import QuadraticTask
    monkeypatch.setattr(QuadraticTask, "grad", lambda self, w: self.H @ w)  # drops the linear term
    rep = gradcheck_suite(small_fleet, np.random.default_rng(0), probes=5)
    assert not rep.passed
    bad = [e for e in rep.entries if not e.passed]
    assert any(e.operation == "population_grad" for e in bad)
    assert "coordinate" in rep.table()
