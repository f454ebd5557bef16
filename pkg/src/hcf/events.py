"""Interaction events: CSV ingestion, the chronological log, windows and synthetic data."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EmptyLogError, ParseError

_log = logging.getLogger(__name__)

CSV_COLUMNS = ("date", "user_id", "item_id")
SYNTHETIC_ORIGIN = dt.date(2000, 1, 3)


class Interaction(NamedTuple):
    t: int
    user: int
    item: int


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventLog:
    """Chronologically sorted (day, user, item) events with dense id vocabularies.

    ``user_ids[k]`` is the external id of dense user ``k`` (same for items).
    Vocabularies are kept in ascending external-id order so that logs cut
    from the same corpus can be re-keyed against each other with a binary
    search.  Day indices are absolute offsets from ``origin`` and are never
    rebased by slicing.
    """

    t: np.ndarray
    user: np.ndarray
    item: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    origin: dt.date | None = None

    def __post_init__(self):
        for name in ("t", "user", "item"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64))
        for name in ("user_ids", "item_ids"):
            object.__setattr__(self, name, _frozen(getattr(self, name), str))
        if not (len(self.t) == len(self.user) == len(self.item)):
            raise ValueError("event arrays differ in length")
        if len(self.t):
            if self.t[0] < 0:
                raise ValueError("negative day index")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events are not sorted by day")
            if self.user.min() < 0 or self.user.max() >= len(self.user_ids):
                raise ValueError("user id outside vocabulary")
            if self.item.min() < 0 or self.item.max() >= len(self.item_ids):
                raise ValueError("item id outside vocabulary")
        for ids in (self.user_ids, self.item_ids):
            if len(ids) > 1 and not np.all(ids[1:] > ids[:-1]):
                raise ValueError("vocabulary must be strictly ascending")

    @classmethod
    def from_arrays(cls, t, user, item, user_ids, item_ids, origin=None) -> EventLog:
        """Build a log from unsorted arrays; sorting by day is stable."""
        t = np.asarray(t, dtype=np.int64)
        order = np.argsort(t, kind="stable")
        return cls(t[order], np.asarray(user)[order], np.asarray(item)[order],
                   user_ids, item_ids, origin)

    @classmethod
    def from_keys(cls, t, user_keys, item_keys, origin=None) -> EventLog:
        """Build a log from external ids, assigning dense ids in ascending key order."""
        user_keys = np.asarray(user_keys, dtype=str)
        item_keys = np.asarray(item_keys, dtype=str)
        user_ids, user = np.unique(user_keys, return_inverse=True)
        item_ids, item = np.unique(item_keys, return_inverse=True)
        return cls.from_arrays(t, user.ravel(), item.ravel(), user_ids, item_ids, origin)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for row in zip(self.t.tolist(), self.user.tolist(), self.item.tolist()):
            yield Interaction(*row)

    @property
    def events(self) -> list[Interaction]:
        return list(self)

    @property
    def is_empty(self) -> bool:
        return len(self.t) == 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def day_range(self) -> tuple[int, int] | None:
        if self.is_empty:
            return None
        return int(self.t[0]), int(self.t[-1])

    @property
    def user_vocab(self) -> dict[str, int]:
        return {k: n for n, k in enumerate(self.user_ids.tolist())}

    @property
    def item_vocab(self) -> dict[str, int]:
        return {k: n for n, k in enumerate(self.item_ids.tolist())}

    def transposed(self) -> EventLog:
        """The same events with user and item roles swapped."""
        return EventLog(self.t, self.item, self.user, self.item_ids, self.user_ids, self.origin)

    def days(self, start: int, end: int, compact: bool = True) -> EventLog:
        """Events with ``start <= t <= end``.

        With ``compact`` the vocabularies shrink to the entities present and
        dense ids are renumbered; otherwise the vocabularies are kept.
        """
        lo = np.searchsorted(self.t, start, side="left")
        hi = np.searchsorted(self.t, end, side="right")
        t, u, i = self.t[lo:hi], self.user[lo:hi], self.item[lo:hi]
        if not compact:
            return EventLog(t, u, i, self.user_ids, self.item_ids, self.origin)
        users, u = np.unique(u, return_inverse=True)
        items, i = np.unique(i, return_inverse=True)
        return EventLog(t, u.ravel(), i.ravel(), self.user_ids[users], self.item_ids[items],
                        self.origin)

    def reindex(self, reference: EventLog) -> EventLog:
        """Re-key events into ``reference``'s id space.

        Events whose user or item is unknown to ``reference`` are dropped.
        """
        u = _lookup(reference.user_ids, self.user_ids)[self.user]
        i = _lookup(reference.item_ids, self.item_ids)[self.item]
        keep = (u >= 0) & (i >= 0)
        return EventLog(self.t[keep], u[keep], i[keep], reference.user_ids, reference.item_ids,
                        self.origin)

    @staticmethod
    def concat(logs: Sequence[EventLog]) -> EventLog:
        """Merge logs sharing one vocabulary; ties keep the order of ``logs``."""
        first = logs[0]
        for other in logs[1:]:
            if not (np.array_equal(other.user_ids, first.user_ids)
                    and np.array_equal(other.item_ids, first.item_ids)):
                raise ValueError("logs do not share a vocabulary; reindex first")
        return EventLog.from_arrays(
            np.concatenate([g.t for g in logs]),
            np.concatenate([g.user for g in logs]),
            np.concatenate([g.item for g in logs]),
            first.user_ids, first.item_ids, first.origin)

    def same_events(self, other: EventLog) -> bool:
        return (np.array_equal(self.t, other.t)
                and np.array_equal(self.user_ids[self.user], other.user_ids[other.user])
                and np.array_equal(self.item_ids[self.item], other.item_ids[other.item]))


def _lookup(reference_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Position of each of ``ids`` in the sorted ``reference_ids``, or -1."""
    if len(reference_ids) == 0:
        return np.full(len(ids), -1, dtype=np.int64)
    pos = np.searchsorted(reference_ids, ids)
    pos = np.minimum(pos, len(reference_ids) - 1)
    return np.where(reference_ids[pos] == ids, pos, -1).astype(np.int64)


@dataclass(frozen=True)
class TemporalSplit:
    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        (a, b), (c, d), (e, f) = self.train, self.valid, self.test
        if not (a <= b < c <= d < e <= f):
            raise ConfigError(f"invalid split ordering: {self.train} {self.valid} {self.test}")

    @classmethod
    def trailing(cls, last_day: int, valid_days: int = 30, test_days: int = 30) -> TemporalSplit:
        """Train on everything up to the last ``valid_days + test_days`` days."""
        test = (last_day - test_days + 1, last_day)
        valid = (test[0] - valid_days, test[0] - 1)
        return cls((0, valid[0] - 1), valid, test)


@dataclass(frozen=True)
class Perimeter:
    """Users and items a model can score; the scoring set is their Cartesian product."""

    users: np.ndarray
    items: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "users", _frozen(np.unique(self.users), np.int64))
        object.__setattr__(self, "items", _frozen(np.unique(self.items), np.int64))

    def __eq__(self, other):
        return (isinstance(other, Perimeter) and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items))

    def __len__(self):
        return len(self.users) * len(self.items)


def perimeter_of(log: EventLog) -> Perimeter:
    return Perimeter(np.unique(log.user), np.unique(log.item))


def slice_window(log: EventLog, end_day: int, size_days: int) -> EventLog:
    """The ``size_days`` days ending at ``end_day`` inclusive, with compacted vocabularies.

    An empty result is returned (``is_empty``) rather than raised.
    """
    if size_days < 1:
        raise ValueError("size_days must be >= 1")
    return log.days(end_day - size_days + 1, end_day)


def ingest_csv(path, columns: Sequence[str] = CSV_COLUMNS) -> EventLog:
    """Read ``date,user_id,item_id`` rows into a log.

    Dates are ISO calendar dates mapped to day offsets from the earliest
    date.  Duplicate rows are kept.
    """
    path = Path(path)
    dates, users, items = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyLogError(f"{path}: empty file")
        header = [h.strip() for h in header]
        try:
            cols = [header.index(c) for c in columns]
        except ValueError:
            raise ParseError(f"header must contain columns {list(columns)}, got {header}", 1)
        width = max(cols) + 1
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < width or any(not row[c].strip() for c in cols):
                raise ParseError(f"expected columns {list(columns)}, got {row!r}", lineno)
            day, user, item = (row[c].strip() for c in cols)
            try:
                dates.append(dt.date.fromisoformat(day))
            except ValueError:
                raise ParseError(f"not an ISO-8601 date: {day!r}", lineno)
            users.append(user)
            items.append(item)
    if not dates:
        raise EmptyLogError(f"{path}: no events")
    origin = min(dates)
    t = [(d - origin).days for d in dates]
    log = EventLog.from_keys(t, users, items, origin)
    _log.info("ingested %d events (%d users, %d items) from %s",
              len(log), log.n_users, log.n_items, path)
    return log


def write_csv(log: EventLog, path, origin: dt.date | None = None):
    origin = origin or log.origin or SYNTHETIC_ORIGIN
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        users, items = log.user_ids[log.user], log.item_ids[log.item]
        for t, u, i in zip(log.t.tolist(), users.tolist(), items.tolist()):
            w.writerow(((origin + dt.timedelta(days=t)).isoformat(), u, i))


@dataclass(frozen=True)
class SyntheticConfig:
    """Latent random-walk generator.

    Every user and item carries a latent vector that drifts by an
    independent Gaussian step each day; events pick a user uniformly and an
    item by a softmax over ``temperature * <user, item>``.

    With ``stationary`` the step is variance preserving,
    ``v <- sqrt(1 - k s^2) v + s e``, so latent norms (and therefore the
    sharpness of preferences and the relative drift rate) stay constant over
    time.  A plain walk lets norms grow like ``sqrt(1 + t k s^2)``, which
    makes late preferences ever sharper and ever slower to change.
    """

    num_users: int = 200
    num_items: int = 500
    latent_dim: int = 16
    drift_std: float = 0.0559
    events_per_day: float = 100.0
    num_days: int = 425
    temperature: float = 4.0
    seed: int = 0
    stationary: bool = False

    def __post_init__(self):
        for name in ("num_users", "num_items", "latent_dim", "num_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synthetic {name} must be >= 1")
        if self.drift_std < 0:
            raise ConfigError("synthetic drift_std must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("synthetic temperature must be > 0")
        if self.events_per_day <= 0:
            raise ConfigError("synthetic events_per_day must be > 0")
        if self.stationary and self.latent_dim * self.drift_std ** 2 >= 1:
            raise ConfigError("stationary drift needs latent_dim * drift_std^2 < 1")

    @staticmethod
    def drift_for_half_life(half_life_days: float, latent_dim: int, stationary=True) -> float:
        """Step std giving a preference half-life of ``half_life_days``: the
        correlation between a (user, item) affinity today and the same
        affinity that many days later is 1/2.

        An affinity is a product of two independently drifting vectors, so
        its correlation is the product of theirs.  Stationary walk: each
        vector keeps correlation (1 - k s^2)^(m/2) after m days.  Plain walk
        from day 0: each vector keeps a cosine of about 1/sqrt(1 + m k s^2).
        """
        k, m = latent_dim, half_life_days
        if stationary:
            return float(np.sqrt((1.0 - 0.5 ** (1.0 / m)) / k))
        return float(np.sqrt(1.0 / (m * k)))


def generate_synthetic(cfg: SyntheticConfig) -> EventLog:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    users = rng.standard_normal((cfg.num_users, k)) / np.sqrt(k)
    items = rng.standard_normal((cfg.num_items, k)) / np.sqrt(k)
    ts, us, its = [], [], []
    for day in range(cfg.num_days):
        n = rng.poisson(cfg.events_per_day)
        if n:
            u = rng.integers(cfg.num_users, size=n)
            logits = cfg.temperature * (users[u] @ items.T)
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            cdf = np.cumsum(p, axis=1)
            r = rng.random(n) * cdf[:, -1]
            i = np.minimum((cdf < r[:, None]).sum(axis=1), cfg.num_items - 1)
            ts.append(np.full(n, day))
            us.append(u)
            its.append(i)
        if cfg.drift_std > 0:
            keep = np.sqrt(1.0 - k * cfg.drift_std ** 2) if cfg.stationary else 1.0
            users = keep * users + cfg.drift_std * rng.standard_normal(users.shape)
            items = keep * items + cfg.drift_std * rng.standard_normal(items.shape)
    if not ts:
        return EventLog([], [], [], [], [], SYNTHETIC_ORIGIN)
    t = np.concatenate(ts)
    u_keys = np.char.add("u", np.char.zfill(np.concatenate(us).astype(str), 5))
    i_keys = np.char.add("i", np.char.zfill(np.concatenate(its).astype(str), 5))
    return EventLog.from_keys(t, u_keys, i_keys, SYNTHETIC_ORIGIN)
