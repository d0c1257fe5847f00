import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asyncpfl.numerics import DimensionError, fd_gradient, rel_error
from asyncpfl.tasks import (DataBatch, QuadraticTask, dispersion_formula, diversity, fleet_from_json,
                            fleet_to_json, global_minimizer, make_fleet, measure_constants, population_grad,
                            population_loss, probe_points, shared_hessian)


def test_quadratic_grad_matches_fd(quad_fleet):
    t = quad_fleet[3]
    w = np.random.default_rng(0).normal(size=t.dim)
    assert rel_error(t.grad(w), fd_gradient(t.loss, w)) < 1e-6


def test_quadratic_minimizer_has_zero_gradient(quad_fleet):
    for t in quad_fleet[:3]:
        assert np.linalg.norm(t.grad(t.minimizer)) < 1e-10


def test_smoothness_is_top_eigenvalue():
    task = make_fleet("quadratic", 1, 0.0, 6, np.random.default_rng(3), lipschitz=2.5)[0]
    assert task.smoothness == pytest.approx(2.5, rel=1e-12)


def test_batch_gradient_is_unbiased_with_exact_variance(small_fleet):
    t = small_fleet[0]
    w = np.ones(t.dim)
    batch = t.sample_batch(200_000, np.random.default_rng(4))
    sg = t.sample_grads(w, batch)
    assert np.allclose(sg.mean(axis=0), t.grad(w), atol=5e-3)
    var = float(np.mean(np.sum((sg - t.grad(w)) ** 2, axis=1)))
    assert var == pytest.approx(t.noise ** 2, rel=0.02)


def test_batch_hvp_is_noise_free(small_fleet):
    t = small_fleet[1]
    batch = t.sample_batch(3, np.random.default_rng(0))
    v = np.arange(t.dim, dtype=float)
    assert np.allclose(t.batch_hvp(np.zeros(t.dim), v, batch), t.H @ v)


def test_sample_batch_rejects_empty(small_fleet):
    with pytest.raises(ValueError):
        small_fleet[0].sample_batch(0, np.random.default_rng(0))


def test_grad_rejects_wrong_dimension(small_fleet):
    with pytest.raises(DimensionError):
        small_fleet[0].grad(np.zeros(small_fleet[0].dim + 1))


def test_quadratic_rejects_mismatched_rows():
    with pytest.raises(DimensionError):
        QuadraticTask(0, np.ones((3, 2)), np.ones(4))


def test_zero_heterogeneity_gives_identical_minimizers():
    fleet = make_fleet("quadratic", 5, 0.0, 4, np.random.default_rng(2))
    m = [t.minimizer for t in fleet]
    assert all(np.allclose(x, m[0]) for x in m)
    assert diversity(fleet, np.ones(4)) == pytest.approx(0.0, abs=1e-20)


def test_minimizers_sit_at_heterogeneity_distance():
    fleet = make_fleet("quadratic", 6, 2.0, 5, np.random.default_rng(8))
    center = np.mean([t.minimizer for t in fleet], axis=0)
    w_bar = global_minimizer(fleet)
    assert np.allclose(center, w_bar)


def test_dispersion_formula_matches_monte_carlo():
    # average over many random fleets of the realized diversity vs the closed form
    vals = []
    for s in range(200):
        fleet = make_fleet("quadratic", 8, 1.5, 4, np.random.default_rng(s))
        vals.append(diversity(fleet, np.zeros(4)) / dispersion_formula(fleet, 1.5))
    assert np.mean(vals) == pytest.approx(1.0, abs=0.06)


def test_constants_for_quadratic_are_analytic(quad_fleet):
    c = measure_constants(quad_fleet)
    assert c.sigma_g == 0.5 and c.rho == 0.0 and c.sigma_h == 0.0
    assert c.L == pytest.approx(max(t.smoothness for t in quad_fleet))
    assert c.provenance["gamma_g"] == "analytic"
    assert c.gamma_g == pytest.approx(math.sqrt(diversity(quad_fleet, np.ones(20))), rel=1e-9)
    assert math.isinf(c.G)


def test_constants_need_enough_probes(quad_fleet):
    with pytest.raises(ValueError):
        measure_constants(quad_fleet, probe_count=10)


def test_probe_points_stay_inside_ball():
    pts = probe_points(np.ones(3), 0.5, 500, np.random.default_rng(0))
    assert np.all(np.linalg.norm(pts - 1.0, axis=1) <= 0.5 + 1e-12)


def test_logistic_grad_and_hvp_match_fd(logistic_fleet):
    t = logistic_fleet[0]
    w = np.random.default_rng(1).normal(size=t.dim) * 0.3
    assert rel_error(t.grad(w), fd_gradient(t.loss, w)) < 1e-6
    v = np.random.default_rng(2).normal(size=t.dim)
    fd = (t.grad(w + 1e-5 * v) - t.grad(w - 1e-5 * v)) / 2e-5
    assert rel_error(t.hvp(w, v), fd) < 1e-6


def test_logistic_minimizer_and_smoothness(logistic_fleet):
    t = logistic_fleet[2]
    assert np.linalg.norm(t.grad(t.minimizer)) < 1e-8
    eig = np.linalg.eigvalsh(t.hessian(np.zeros(t.dim)))[-1]
    assert eig <= t.smoothness + 1e-12


def test_logistic_constants_are_flagged_estimated(logistic_fleet):
    c = measure_constants(logistic_fleet)
    assert c.provenance["L"] == "estimated"
    assert 0 < c.L <= max(t.smoothness for t in logistic_fleet) * (1 + 1e-9)


def test_fleet_json_round_trip(small_fleet, logistic_fleet):
    for fleet in (small_fleet, logistic_fleet):
        back = fleet_from_json(fleet_to_json(fleet))
        w = np.full(fleet[0].dim, 0.2)
        assert [population_loss(t, w) for t in back] == [population_loss(t, w) for t in fleet]
        assert np.array_equal(population_grad(back[0], w), population_grad(fleet[0], w))


def test_shared_hessian_detection(small_fleet, logistic_fleet):
    assert shared_hessian(small_fleet)
    assert not shared_hessian(logistic_fleet)


def test_make_fleet_validates_arguments():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        make_fleet("quadratic", 0, 1.0, 3, rng)
    with pytest.raises(ValueError):
        make_fleet("quadratic", 2, -1.0, 3, rng)
    with pytest.raises(ValueError):
        make_fleet("cnn", 2, 1.0, 3, rng)


def test_data_batch_concat():
    a, b = DataBatch(np.zeros((2, 3))), DataBatch(np.ones((1, 3)))
    assert len(DataBatch.concat(a, b)) == 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_lipschitz_rescaling_property(seed, lip):
    fleet = make_fleet("quadratic", 2, 1.0, 4, np.random.default_rng(seed), lipschitz=lip)
    assert fleet[0].smoothness == pytest.approx(lip, rel=1e-9)
