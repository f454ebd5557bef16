import numpy as np
import pytest

from hcf.baselines import historical_fit, init_mf
from hcf.evaluation import (ITEM, USER, MetricsReport, ap_rows, average_precision, build_queries,
                            evaluate, ewma, rank_candidates, sym_map)
from hcf.events import EventLog, Perimeter, perimeter_of
from hcf.history import HistoryIndex
from hcf.model import init_model
from hcf.training import validation_setup

import oracles
from conftest import random_log, small_synthetic


def test_worked_average_precision():
    assert average_precision([7, 3, 9, 4], {7, 9}) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([1, 2, 3], {1}) == 1.0
    assert average_precision([1, 2, 3], {3}) == pytest.approx(1 / 3)


def test_average_precision_errors():
    with pytest.raises(ValueError):
        average_precision([1, 2], set())
    with pytest.raises(ValueError):
        average_precision([1, 2], {5})


def test_average_precision_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 30))
        ranking = rng.permutation(n).tolist()
        rel = set(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist())
        assert abs(average_precision(ranking, rel) - oracles.average_precision(ranking, rel)) \
            < 1e-12


def test_ties_go_to_lower_id():
    assert rank_candidates([0.5, 0.5, 0.9, 0.5], [3, 1, 2, 0]).tolist() == [2, 0, 1, 3]
    scores = np.array([[0.0, 0.0, 0.0]])
    assert ap_rows(scores, np.array([[False, False, True]]))[0] == pytest.approx(1 / 3)
    assert ap_rows(scores, np.array([[True, False, False]]))[0] == 1.0


def test_ap_rows_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(2, 25))
        scores = rng.integers(0, 4, size=(3, n)).astype(float)   # many ties
        rel = rng.random((3, n)) < 0.3
        rel[:, 0] = True
        got = ap_rows(scores, rel)
        for r in range(3):
            ranking = oracles.ranking_by_score(scores[r], range(n))
            want = oracles.average_precision(ranking, np.flatnonzero(rel[r]).tolist())
            assert got[r] == pytest.approx(want, abs=1e-12)


def test_sym_map():
    assert sym_map(0.2, 0.3) == pytest.approx(0.24, abs=1e-15)
    assert sym_map(0.0, 0.0) == 0.0
    assert sym_map(0.5, 0.0) == 0.0
    assert sym_map(0.4, 0.4) == pytest.approx(0.4)


def test_ewma():
    xs = [0.1, 0.5, 0.2, 0.9]
    assert ewma(xs, 1.0) == xs
    assert ewma(xs, 0.2) == pytest.approx(oracles.ewma(xs, 0.2))
    assert ewma([]) == []
    with pytest.raises(ValueError):
        ewma(xs, 0.0)


def test_build_queries_drops_out_of_perimeter():
    log = EventLog.from_keys([5, 5, 5, 6], ["a", "a", "b", "b"], ["x", "z", "z", "x"])
    per = Perimeter([0, 1], [0])            # item z unseen in training
    uq = build_queries(log, [5, 6], per, USER)
    assert [(q.day, q.anchor, q.relevant) for q in uq] == [(5, 0, {0}), (6, 1, {0})]
    assert uq[0].candidates == (0,)
    iq = build_queries(log, [5, 6], per, ITEM)
    assert [(q.day, q.anchor, q.relevant) for q in iq] == [(5, 0, {0}), (6, 0, {1})]


def brute_force_report(model, index, log, days, per):
    """Per-query loop using single-pair scores and the oracle AP."""
    out = {}
    for side in (USER, ITEM):
        aps = []
        for q in build_queries(log, days, per, side):
            scores = {}
            for c in q.candidates:
                u, i = (q.anchor, c) if side == USER else (c, q.anchor)
                scores[c] = model.score(index, u, i, q.day) if index is not None \
                    else model.score(u, i)
            ranking = oracles.ranking_by_score(scores, q.candidates)
            aps.append(oracles.average_precision(ranking, q.relevant))
        out[side] = float(np.mean(aps))
    return out[USER], out[ITEM]


def test_evaluate_matches_brute_force_for_hcf():
    log = small_synthetic(5)
    train, valid = log.days(0, 29), log.days(30, 39)
    m = init_model(train.n_users, train.n_items, d=4, n=5, seed=1)
    keyed, days, index = validation_setup(train, valid, 5)
    per = perimeter_of(train)
    rep = evaluate(m, index, keyed, days, per)
    mu, mi = brute_force_report(m, index, keyed, days, per)
    assert rep.map_user == pytest.approx(mu, abs=1e-12)
    assert rep.map_item == pytest.approx(mi, abs=1e-12)
    assert rep.map_sym == pytest.approx(oracles.harmonic(mu, mi), abs=1e-12)


def test_evaluate_matches_brute_force_for_static_models():
    log = small_synthetic(6)
    train, valid = log.days(0, 29), log.days(30, 39)
    keyed, days, index = validation_setup(train, valid, 5)
    per = perimeter_of(train)
    for m in (historical_fit(train), init_mf(train.n_users, train.n_items, d=3, seed=2)):
        rep = evaluate(m, index, keyed, days, per)
        mu, mi = brute_force_report(m, None, keyed, days, per)
        assert (rep.map_user, rep.map_item) == pytest.approx((mu, mi), abs=1e-12)


class _RandomScores:
    is_static = False

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def score_matrix(self, index, users, items, day):
        return self.rng.random((len(users), len(items)))


def test_random_scores_give_random_ranking_map():
    """A random scorer's mAP matches the Monte Carlo expectation for each query."""
    log = small_synthetic(7, num_users=8, num_items=12, events_per_day=6)
    train, valid = log.days(0, 29), log.days(30, 39)
    keyed, days, index = validation_setup(train, valid, 5)
    per = perimeter_of(train)
    reps = [evaluate(_RandomScores(s), index, keyed, days, per) for s in range(200)]
    got = np.mean([r.map_user for r in reps])
    rng = np.random.default_rng(0)
    qs = build_queries(keyed, days, per, USER)
    want = np.mean([oracles.expected_random_ap(len(q.candidates), len(q.relevant), 400, rng)
                    for q in qs])
    assert got == pytest.approx(want, abs=0.01)


def test_report_daily_rows_and_pooling():
    a = MetricsReport.from_queries([0.5, 1.0], [3, 4], [0.25], [3])
    assert a.map_user == 0.75 and a.map_item == 0.25
    assert a.daily == [(3, 0.5, 0.25, sym_map(0.5, 0.25)), (4, 1.0, 0.0, 0.0)]
    rows = a.daily_rows(alpha=1.0)
    assert [r[4] for r in rows] == [r[3] for r in rows]
    b = MetricsReport.from_queries([0.0], [5], [1.0], [5])
    p = MetricsReport.pooled([a, b])
    assert p.map_user == pytest.approx(0.5) and p.map_item == pytest.approx(0.625)
    assert p.query_count == {USER: 3, ITEM: 2}


def test_empty_evaluation_is_degenerate():
    log = random_log(0)
    train = log.days(0, 5)
    rep = evaluate(historical_fit(train), HistoryIndex(train, 3), train, [], perimeter_of(train))
    assert rep.degenerate and rep.map_sym == 0.0


def test_symmetry_of_user_and_item_maps():
    """Transposing the log and mirroring the model swaps the two maps."""
    log = small_synthetic(8)
    train, valid = log.days(0, 29), log.days(30, 39)
    m = init_model(train.n_users, train.n_items, d=4, n=5, seed=3)
    keyed, days, index = validation_setup(train, valid, 5)
    rep = evaluate(m, index, keyed, days, perimeter_of(train))
    tk, tdays, tindex = validation_setup(train.transposed(), valid.transposed(), 5)
    trep = evaluate(m.mirrored(), tindex, tk, tdays, perimeter_of(train.transposed()))
    assert (trep.map_user, trep.map_item) == (rep.map_item, rep.map_user)
