import numpy as np
import pytest

from hcf.baselines import (HistoricalModel, MfModel, historical_fit, implicit_targets, init_mf,
                           mf_bpr_score, mf_implicit_loss, mf_implicit_step)
from hcf.errors import DivergenceError, UnknownEntityError
from hcf.events import EventLog, perimeter_of
from hcf.history import HistoryIndex
from hcf.model import TripletBatch
from hcf.training import NegativeSampler, grad_check_report

import oracles
from conftest import random_log


def test_historical_counts():
    log = EventLog.from_keys([0, 1, 2], ["a", "a", "b"], ["x", "x", "y"])
    m = historical_fit(log)
    assert m.score(0, 0) == 2
    assert m.score(1, 0) == 0
    assert m.score(1, 1) == 1
    assert np.array_equal(m.score_matrix(None, [0, 1], [0, 1]), [[2, 0], [0, 1]])


def test_historical_outside_perimeter():
    m = historical_fit(random_log(0))
    with pytest.raises(UnknownEntityError):
        m.score(m.n_users, 0)


def test_historical_duplicates_preserve_ranking():
    """Adding copies of existing events can only scale counts of the same pairs."""
    log = EventLog.from_keys([0, 0, 1], ["a", "a", "b"], ["x", "y", "y"])
    doubled = EventLog.concat([log, log])
    a = historical_fit(log).score_matrix(None, [0, 1], [0, 1])
    b = historical_fit(doubled).score_matrix(None, [0, 1], [0, 1])
    assert np.array_equal(np.argsort(-a, axis=1, kind="stable"),
                          np.argsort(-b, axis=1, kind="stable"))


def test_mf_score_is_dot_product():
    m = init_mf(3, 4, d=5, seed=0)
    assert mf_bpr_score(m, 1, 2) == pytest.approx(float(m.user_factors[1] @ m.item_factors[2]))
    mat = m.score_matrix(None, [0, 2], [1, 3])
    assert mat[1, 0] == pytest.approx(m.score(2, 1))
    with pytest.raises(UnknownEntityError):
        m.score(3, 0)


def test_zero_mf_gives_ln2_loss():
    log = random_log(1)
    idx = HistoryIndex(log, 3)
    rng = np.random.default_rng(0)
    batch = NegativeSampler(idx, perimeter_of(log)).sample(log.t, log.user, log.item, rng)
    m = MfModel(np.zeros((log.n_users, 4)), np.zeros((log.n_items, 4)), l2=0.0)
    assert m.loss(idx, batch) == pytest.approx(np.log(2), abs=1e-12)


def test_mf_bpr_loss_matches_oracle():
    m = init_mf(4, 5, d=3, seed=2, l2=0.1)
    batch = TripletBatch.of([(0, 1, 2, 4, 0), (0, 3, 1, 0, 1)])
    U, V = m.user_factors, m.item_factors
    want = (oracles.bpr_triplet_loss(U[1] @ V[2], U[1] @ V[4])
            + 0.1 * (U[1] @ U[1] + V[2] @ V[2] + V[4] @ V[4])
            + oracles.bpr_triplet_loss(U[3] @ V[1], U[0] @ V[1])
            + 0.1 * (U[3] @ U[3] + V[1] @ V[1] + U[0] @ U[0])) / 2
    assert m.loss(None, batch) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_mf_bpr_gradient(seed):
    log = random_log(seed)
    idx = HistoryIndex(log, 3)
    rng = np.random.default_rng(seed)
    batch = NegativeSampler(idx, perimeter_of(log)).sample(log.t[:6], log.user[:6],
                                                          log.item[:6], rng)
    rep = grad_check_report(init_mf(log.n_users, log.n_items, d=4, l2=0.05, seed=seed),
                            batch, 1e-5, idx)
    assert rep.max_error < 1e-6


def test_implicit_loss_matches_oracle():
    log = random_log(3, n_users=4, n_items=5, n_events=15)
    m = init_mf(log.n_users, log.n_items, d=3, variant="implicit", l2=0.02, alpha_conf=5.0,
                seed=1)
    counts = {}
    for _, u, i in log:
        counts[(u, i)] = counts.get((u, i), 0) + 1
    want = oracles.implicit_mf_loss(m.user_factors, m.item_factors, counts, 0.02, 5.0)
    got = mf_implicit_loss(m, *implicit_targets(log), need_grad=False)[0]
    assert got == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_implicit_gradient(seed):
    log = random_log(seed)
    m = init_mf(log.n_users, log.n_items, d=4, variant="implicit", l2=0.05, seed=seed)
    assert grad_check_report(m, log, 1e-5).max_error < 1e-6


def test_implicit_step_decreases_loss_for_small_lr():
    log = random_log(4)
    m = init_mf(log.n_users, log.n_items, d=4, variant="implicit", alpha_conf=2.0, seed=0)
    losses = [mf_implicit_step(m, log, 1e-3)[1] for _ in range(20)]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_implicit_divergence_is_reported():
    log = random_log(4)
    m = init_mf(log.n_users, log.n_items, d=4, variant="implicit", seed=0)
    with pytest.raises(DivergenceError):
        for _ in range(200):
            mf_implicit_step(m, log, 10.0)


def test_implicit_step_needs_implicit_model():
    log = random_log(0)
    with pytest.raises(ValueError):
        mf_implicit_step(init_mf(log.n_users, log.n_items), log, 0.1)


def test_historical_copy_is_independent():
    m = historical_fit(random_log(0))
    c = m.copy()
    c.counts.data[:] = 0
    assert m.counts.sum() > 0
    assert isinstance(c, HistoricalModel)
