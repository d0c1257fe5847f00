import numpy as np
import pytest

from asyncpfl.estimators import OptionA, OptionB
from asyncpfl.federation import (DivergenceError, ServerState, client_local_run, run_fedavg_round,
                                 server_apply)
from asyncpfl.numerics import NonFiniteError, SeededRng


def test_local_run_chains_q_sgd_steps(small_fleet):
    t = small_fleet[0]
    rule = OptionA(0.05, 2)
    run = client_local_run(t, np.zeros(t.dim), rule, 4, SeededRng(1).client(0), keep_grads=True)
    streams = SeededRng(1).client(0)
    w = np.zeros(t.dim)
    for _ in range(4):
        w = w - 0.05 * t.batch_grad(w, t.sample_batch(2, streams.batch))
    assert np.array_equal(run.delta, np.zeros(t.dim) - w)
    assert len(run.grads) == 4 and run.batches == 4


def test_local_run_counts_maml_batches(small_fleet):
    run = client_local_run(small_fleet[0], np.zeros(5), OptionB(0.05, 0.1), 3, SeededRng(0).client(0))
    assert run.batches == 9


def test_local_run_rejects_zero_q(small_fleet):
    with pytest.raises(ValueError):
        client_local_run(small_fleet[0], np.zeros(5), OptionA(0.1), 0, SeededRng(0).client(0))


def test_local_run_detects_blow_up(small_fleet):
    with pytest.raises(DivergenceError):
        client_local_run(small_fleet[0], np.full(5, 10.0), OptionA(1e6), 5, SeededRng(0).client(0))


def test_server_apply_scales_by_beta_and_logs_row():
    s = ServerState(np.ones(3), t=4, beta=0.5)
    new, row = server_apply(s, np.full(3, 2.0), client=7, download_step=2, snapshot_hash="h")
    assert np.array_equal(new.w, np.zeros(3)) and new.t == 5
    assert (row.t, row.client, row.omega, row.staleness) == (4, 7, 2, 2)
    assert np.array_equal(s.w, np.ones(3))  # previous state untouched


def test_server_apply_validates_inputs():
    s = ServerState(np.zeros(2), t=1)
    with pytest.raises(ValueError):
        server_apply(s, np.zeros(2), 0, download_step=2)
    with pytest.raises(NonFiniteError):
        server_apply(s, np.array([np.nan, 0.0]), 0, 0)
    with pytest.raises(DivergenceError):
        server_apply(s, np.array([-1e9, 0.0]), 0, 0)
    with pytest.raises(ValueError):
        ServerState(np.zeros(2), beta=0.0)


def test_fedavg_round_applies_mean_update(small_fleet):
    rule = OptionA(0.1)
    s = ServerState(np.zeros(5), beta=1.0)
    streams = {i: SeededRng(2).client(i) for i in range(4)}
    new = run_fedavg_round(s, small_fleet, [2, 0], rule, 2, streams)
    d = [client_local_run(small_fleet[i], s.w, rule, 2, SeededRng(2).client(i)).delta for i in (0, 2)]
    assert np.allclose(new.w, s.w - np.mean(d, axis=0))
    with pytest.raises(ValueError):
        run_fedavg_round(s, small_fleet, [], rule, 2, streams)
