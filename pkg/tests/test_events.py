import datetime as dt

import numpy as np
import pytest

from hcf.errors import ConfigError, EmptyLogError, ParseError
from hcf.events import (EventLog, Perimeter, SyntheticConfig, TemporalSplit, generate_synthetic,
                        ingest_csv, perimeter_of, slice_window, write_csv)


def write(tmp_path, text, name="events.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_ingest_single_row(tmp_path):
    log = ingest_csv(write(tmp_path, "date,user_id,item_id\n2021-03-01,c1,b7\n"))
    assert len(log) == 1
    assert log.n_users == 1 and log.n_items == 1
    assert log.user_ids[log.user[0]] == "c1"
    assert log.item_ids[log.item[0]] == "b7"
    assert log.origin == dt.date(2021, 3, 1)


def test_ingest_keeps_duplicates_and_sorts(tmp_path):
    text = ("date,user_id,item_id\n"
            "2021-03-05,a,x\n2021-03-01,b,y\n2021-03-05,a,x\n2021-03-02,a,y\n")
    log = ingest_csv(write(tmp_path, text))
    assert len(log) == 4
    assert log.t.tolist() == [0, 1, 4, 4]
    assert [(log.user_ids[u], log.item_ids[i]) for _, u, i in log] == \
        [("b", "y"), ("a", "y"), ("a", "x"), ("a", "x")]


def test_ingest_reordered_columns(tmp_path):
    log = ingest_csv(write(tmp_path, "item_id,date,user_id\nx,2020-01-01,a\n"))
    assert log.user_ids.tolist() == ["a"] and log.item_ids.tolist() == ["x"]


def test_ingest_header_only_is_empty(tmp_path):
    with pytest.raises(EmptyLogError):
        ingest_csv(write(tmp_path, "date,user_id,item_id\n"))
    with pytest.raises(EmptyLogError):
        ingest_csv(write(tmp_path, ""))


@pytest.mark.parametrize("row", ["2021-13-01,a,x", "2021-01-01,,x", "2021-01-01,a"])
def test_ingest_malformed_row_reports_line(tmp_path, row):
    text = f"date,user_id,item_id\n2021-01-01,a,x\n{row}\n"
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(write(tmp_path, text))


def test_ingest_missing_column(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        ingest_csv(write(tmp_path, "date,user\n2021-01-01,a\n"))


def test_csv_round_trip(tmp_path):
    log = generate_synthetic(SyntheticConfig(num_users=5, num_items=7, num_days=9,
                                             events_per_day=3, seed=4))
    path = tmp_path / "out.csv"
    write_csv(log, path)
    back = ingest_csv(path)
    assert np.array_equal(back.t, log.t - log.t[0])
    assert np.array_equal(back.user_ids[back.user], log.user_ids[log.user])
    assert np.array_equal(back.item_ids[back.item], log.item_ids[log.item])


def test_vocab_is_sorted_and_dense():
    log = EventLog.from_keys([2, 0, 1], ["b", "c", "a"], ["z", "y", "z"])
    assert log.user_ids.tolist() == ["a", "b", "c"]
    assert log.item_ids.tolist() == ["y", "z"]
    assert log.t.tolist() == [0, 1, 2]
    assert log.user_vocab == {"a": 0, "b": 1, "c": 2}


def test_log_is_immutable(log):
    with pytest.raises(ValueError):
        log.t[0] = 5
    with pytest.raises(Exception):
        log.t = np.zeros(3)


def test_unsorted_arrays_rejected():
    with pytest.raises(ValueError):
        EventLog(np.array([1, 0]), np.array([0, 0]), np.array([0, 0]), ["a"], ["x"])


def test_days_slice_compacts_and_keeps_absolute_days(log):
    sub = log.days(3, 5)
    assert sub.t.min() >= 3 and sub.t.max() <= 5
    assert np.all(np.isin(sub.user_ids, log.user_ids))
    assert len(np.unique(sub.user)) == sub.n_users
    assert len(np.unique(sub.item)) == sub.n_items
    mask = (log.t >= 3) & (log.t <= 5)
    assert np.array_equal(sub.user_ids[sub.user], log.user_ids[log.user[mask]])


def test_slice_window_is_inclusive(log):
    w = slice_window(log, 7, 3)
    assert set(w.t.tolist()) <= {5, 6, 7}
    assert len(w) == int(((log.t >= 5) & (log.t <= 7)).sum())


def test_slice_window_past_the_start_is_empty(log):
    assert slice_window(log, -5, 3).is_empty


def test_reindex_drops_unknown_entities():
    ref = EventLog.from_keys([0, 0], ["a", "b"], ["x", "y"])
    other = EventLog.from_keys([1, 1, 1], ["a", "c", "b"], ["y", "x", "z"])
    keyed = other.reindex(ref)
    assert keyed.user_ids.tolist() == ["a", "b"]
    assert [(keyed.user_ids[u], keyed.item_ids[i]) for _, u, i in keyed] == [("a", "y")]


def test_transposed_swaps_roles(log):
    tr = log.transposed()
    assert np.array_equal(tr.user, log.item) and np.array_equal(tr.user_ids, log.item_ids)
    assert tr.transposed().same_events(log)


def test_perimeter():
    log = EventLog.from_keys([0, 1], ["a", "b"], ["x", "x"])
    per = perimeter_of(log)
    assert per.users.tolist() == [0, 1] and per.items.tolist() == [0]
    assert len(per) == 2
    empty = perimeter_of(EventLog([], [], [], [], []))
    assert len(empty) == 0
    assert Perimeter([1, 0, 1], [2]) == Perimeter([0, 1], [2])


def test_perimeter_of_one_day(log):
    day = log.days(4, 4)
    per = perimeter_of(day)
    assert len(per.users) == day.n_users and len(per.items) == day.n_items


def test_split_validation():
    TemporalSplit((0, 9), (10, 19), (20, 29))
    with pytest.raises(ConfigError):
        TemporalSplit((0, 10), (10, 19), (20, 29))
    with pytest.raises(ConfigError):
        TemporalSplit((0, 9), (10, 19), (15, 29))
    s = TemporalSplit.trailing(424)
    assert s.test == (395, 424) and s.valid == (365, 394) and s.train == (0, 364)


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(num_users=10, num_items=15, num_days=20, events_per_day=5, seed=3)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.same_events(b)
    c = generate_synthetic(SyntheticConfig(num_users=10, num_items=15, num_days=20,
                                           events_per_day=5, seed=4))
    assert not a.same_events(c)


def test_synthetic_writes_identical_bytes(tmp_path):
    cfg = SyntheticConfig(num_users=10, num_items=15, num_days=20, events_per_day=5, seed=3)
    write_csv(generate_synthetic(cfg), tmp_path / "a.csv")
    write_csv(generate_synthetic(cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(num_users=0)
    with pytest.raises(ConfigError):
        SyntheticConfig(drift_std=-1)
    with pytest.raises(ConfigError):
        SyntheticConfig(latent_dim=4, drift_std=0.6, stationary=True)


def test_zero_drift_keeps_preferences():
    """Without drift, a user's item distribution in the first and second half agree."""
    cfg = SyntheticConfig(num_users=3, num_items=6, latent_dim=2, drift_std=0.0,
                          events_per_day=200, num_days=40, temperature=3.0, seed=1)
    log = generate_synthetic(cfg)
    first, second = log.t < 20, log.t >= 20
    for u in range(log.n_users):
        a = np.bincount(log.item[first & (log.user == u)], minlength=log.n_items)
        b = np.bincount(log.item[second & (log.user == u)], minlength=log.n_items)
        assert np.abs(a / a.sum() - b / b.sum()).sum() < 0.2


def test_half_life_definition():
    """Monte Carlo: affinity correlation after the half-life is about 1/2."""
    k, m = 4, 60
    s = SyntheticConfig.drift_for_half_life(m, k)
    rng = np.random.default_rng(0)
    u0 = rng.standard_normal((20000, k)) / np.sqrt(k)
    i0 = rng.standard_normal((20000, k)) / np.sqrt(k)
    u, i = u0.copy(), i0.copy()
    keep = np.sqrt(1 - k * s * s)
    for _ in range(m):
        u = keep * u + s * rng.standard_normal(u.shape)
        i = keep * i + s * rng.standard_normal(i.shape)
    a0, a1 = (u0 * i0).sum(1), (u * i).sum(1)
    assert abs(np.corrcoef(a0, a1)[0, 1] - 0.5) < 0.03
