"""Ranking evaluation: average precision over daily user- and item-side queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .events import EventLog, Perimeter

USER, ITEM = "user", "item"
EWMA_ALPHA = 0.2


@dataclass(frozen=True)
class Query:
    day: int
    anchor: int
    side: str
    candidates: tuple[int, ...]
    relevant: frozenset[int]


def average_precision(ranking: Sequence[int], relevant) -> float:
    """Mean over the relevant ids of the precision at each one's rank."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("average precision needs at least one relevant id")
    hits, total = 0, 0.0
    for rank, x in enumerate(ranking, start=1):
        if x in relevant:
            hits += 1
            total += hits / rank
    if hits != len(relevant):
        raise ValueError("relevant ids missing from the ranking")
    return total / hits


def rank_candidates(scores, candidates) -> np.ndarray:
    """Candidates by descending score; ties go to the lower id."""
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, -np.asarray(scores, dtype=np.float64)))
    return candidates[order]


def ap_rows(scores: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """Average precision of each row of a score matrix.

    Columns are candidates in ascending id order, so a stable sort on the
    negated scores breaks ties by ascending id.
    """
    order = np.argsort(-scores, axis=1, kind="stable")
    hit = np.take_along_axis(relevant, order, axis=1).astype(np.float64)
    precision = np.cumsum(hit, axis=1) / np.arange(1, scores.shape[1] + 1)
    return (precision * hit).sum(axis=1) / hit.sum(axis=1)


def sym_map(map_user: float, map_item: float) -> float:
    """Harmonic mean of the two sides; 0 when both are 0."""
    total = map_user + map_item
    return 0.0 if total == 0 else 2.0 * map_user * map_item / total


def ewma(series: Sequence[float], alpha: float = EWMA_ALPHA) -> list[float]:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    out = []
    for x in series:
        out.append(x if not out else alpha * x + (1 - alpha) * out[-1])
    return out


def _day_relevance(log: EventLog, day: int, perimeter: Perimeter) -> np.ndarray:
    lo = np.searchsorted(log.t, day, side="left")
    hi = np.searchsorted(log.t, day, side="right")
    u = np.searchsorted(perimeter.users, log.user[lo:hi])
    i = np.searchsorted(perimeter.items, log.item[lo:hi])
    ok = (u < len(perimeter.users)) & (i < len(perimeter.items))
    ok[ok] &= (perimeter.users[u[ok]] == log.user[lo:hi][ok]) \
        & (perimeter.items[i[ok]] == log.item[lo:hi][ok])
    rel = np.zeros((len(perimeter.users), len(perimeter.items)), dtype=bool)
    rel[u[ok], i[ok]] = True
    return rel


def build_queries(log: EventLog, days, perimeter: Perimeter, side: str) -> list[Query]:
    """One query per (day, anchor) with at least one in-perimeter event that day."""
    out = []
    for day in days:
        rel = _day_relevance(log, day, perimeter)
        if side == ITEM:
            rel = rel.T
        anchors, cands = (perimeter.users, perimeter.items) if side == USER \
            else (perimeter.items, perimeter.users)
        cand_tuple = tuple(cands.tolist())
        for row in np.flatnonzero(rel.any(axis=1)):
            out.append(Query(int(day), int(anchors[row]), side, cand_tuple,
                             frozenset(cands[rel[row]].tolist())))
    return out


@dataclass
class MetricsReport:
    map_user: float
    map_item: float
    map_sym: float
    user_ap: np.ndarray = field(repr=False)
    user_day: np.ndarray = field(repr=False)
    item_ap: np.ndarray = field(repr=False)
    item_day: np.ndarray = field(repr=False)

    @classmethod
    def from_queries(cls, user_ap, user_day, item_ap, item_day) -> MetricsReport:
        user_ap, item_ap = np.asarray(user_ap, float), np.asarray(item_ap, float)
        mu = float(np.mean(user_ap)) if len(user_ap) else 0.0
        mi = float(np.mean(item_ap)) if len(item_ap) else 0.0
        return cls(mu, mi, sym_map(mu, mi), user_ap, np.asarray(user_day, np.int64),
                   item_ap, np.asarray(item_day, np.int64))

    @classmethod
    def pooled(cls, reports: Sequence[MetricsReport]) -> MetricsReport:
        """One report over all queries of several reports (one mean per side, then symmetrized)."""
        cat = lambda name: np.concatenate([getattr(r, name) for r in reports]) if reports \
            else np.zeros(0)
        return cls.from_queries(cat("user_ap"), cat("user_day"), cat("item_ap"), cat("item_day"))

    @property
    def query_count(self) -> dict[str, int]:
        return {USER: len(self.user_ap), ITEM: len(self.item_ap)}

    @property
    def degenerate(self) -> bool:
        return len(self.user_ap) == 0 or len(self.item_ap) == 0

    @property
    def daily(self) -> list[tuple[int, float, float, float]]:
        """(day, map_user, map_item, map_sym) for every day holding queries."""
        rows = []
        for day in np.union1d(self.user_day, self.item_day).tolist():
            u = self.user_ap[self.user_day == day]
            i = self.item_ap[self.item_day == day]
            mu = float(u.mean()) if len(u) else 0.0
            mi = float(i.mean()) if len(i) else 0.0
            rows.append((day, mu, mi, sym_map(mu, mi)))
        return rows

    @property
    def daily_series(self) -> list[tuple[int, float]]:
        return [(d, s) for d, _, _, s in self.daily]

    def to_dict(self):
        return {"map_u": self.map_user, "map_i": self.map_item, "map_sym": self.map_sym,
                "queries_u": len(self.user_ap), "queries_i": len(self.item_ap)}

    def daily_rows(self, alpha=EWMA_ALPHA):
        daily = self.daily
        smooth = ewma([r[3] for r in daily], alpha)
        return [(*r, s) for r, s in zip(daily, smooth)]


def evaluate(model, index, log: EventLog, days, perimeter: Perimeter) -> MetricsReport:
    """Score every daily query of ``log`` on ``days`` inside ``perimeter``.

    ``log`` must be keyed in the model's id space.  Dynamic models read
    histories from ``index``, which may contain events of earlier query
    days; it never contributes events of the query day or later since
    histories stop strictly before the day.
    """
    user_ap, user_day, item_ap, item_day = [], [], [], []
    static_scores = None
    for day in days:
        rel = _day_relevance(log, day, perimeter)
        active_u = np.flatnonzero(rel.any(axis=1))
        if not len(active_u):
            continue
        active_i = np.flatnonzero(rel.any(axis=0))
        if getattr(model, "is_static", False):
            if static_scores is None:
                static_scores = model.score_matrix(index, perimeter.users, perimeter.items, day)
            s = static_scores
        else:
            s = model.score_matrix(index, perimeter.users, perimeter.items, day)
        user_ap.append(ap_rows(s[active_u], rel[active_u]))
        item_ap.append(ap_rows(s[:, active_i].T, rel[:, active_i].T))
        user_day.append(np.full(len(active_u), day))
        item_day.append(np.full(len(active_i), day))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return MetricsReport.from_queries(cat(user_ap), cat(user_day), cat(item_ap), cat(item_day))
