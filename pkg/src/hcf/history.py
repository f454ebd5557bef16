"""Per-entity event histories: the last ``n`` counterparts strictly before a day."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnknownEntityError
from .events import EventLog


@dataclass(frozen=True, eq=False)
class _Side:
    """Events grouped by anchor entity, each group in chronological order."""

    ptr: np.ndarray      # group k occupies [ptr[k], ptr[k+1])
    t: np.ndarray
    other: np.ndarray
    key: np.ndarray      # anchor * stride + t, globally non-decreasing
    stride: int

    @classmethod
    def build(cls, anchor, other, t, n_anchor):
        # the log is already sorted by t, so a stable sort by anchor keeps
        # each group chronological and preserves same-day input order
        order = np.argsort(anchor, kind="stable")
        anchor, other, t = anchor[order], other[order], t[order]
        ptr = np.zeros(n_anchor + 1, dtype=np.int64)
        np.cumsum(np.bincount(anchor, minlength=n_anchor), out=ptr[1:])
        stride = int(t.max()) + 2 if len(t) else 1
        return cls(ptr, t, other, anchor * stride + t, stride)

    def window(self, anchors, days, n):
        """Start/end offsets of the trailing history for each (anchor, day) pair."""
        anchors = np.asarray(anchors, dtype=np.int64)
        days = np.clip(np.asarray(days, dtype=np.int64), 0, self.stride - 1)
        end = np.searchsorted(self.key, anchors * self.stride + days, side="left")
        start = np.maximum(self.ptr[anchors], end - n)
        return start, end


class HistoryIndex:
    """Answers "last ``n`` counterpart ids of an entity strictly before day t".

    Histories are event multisets: an item requested twice appears twice.
    Same-day events never enter that day's history.
    """

    def __init__(self, log: EventLog, n: int):
        if n < 1:
            raise ValueError("history capacity n must be >= 1")
        self.n = int(n)
        self.n_users = log.n_users
        self.n_items = log.n_items
        self._users = _Side.build(log.user, log.item, log.t, log.n_users)
        self._items = _Side.build(log.item, log.user, log.t, log.n_items)

    @property
    def per_user(self) -> list[list[tuple[int, int]]]:
        return self._lists(self._users)

    @property
    def per_item(self) -> list[list[tuple[int, int]]]:
        return self._lists(self._items)

    @staticmethod
    def _lists(side):
        return [list(zip(side.t[a:b].tolist(), side.other[a:b].tolist()))
                for a, b in zip(side.ptr[:-1], side.ptr[1:])]

    def user_history(self, u: int, t: int) -> list[int]:
        """Item ids of the last ``n`` events of user ``u`` before day ``t``, oldest first."""
        return self._one(self._users, self.n_users, u, t, "user")

    def item_history(self, i: int, t: int) -> list[int]:
        """User ids of the last ``n`` events of item ``i`` before day ``t``, oldest first."""
        return self._one(self._items, self.n_items, i, t, "item")

    def _one(self, side, size, k, t, kind):
        if not 0 <= k < size:
            raise UnknownEntityError(f"{kind} {k} is not in the index")
        start, end = side.window([k], [t], self.n)
        return side.other[start[0]:end[0]].tolist()

    def user_batch(self, users, days):
        return self._batch(self._users, self.n_users, users, days, "user")

    def item_batch(self, items, days):
        return self._batch(self._items, self.n_items, items, days, "item")

    def _batch(self, side, size, anchors, days, kind):
        """Padded histories for many (anchor, day) pairs.

        Returns ``(ids, mask)``, both ``(len(anchors), n)``; row k holds the
        history of pair k left-aligned, oldest first, padded with id 0 where
        ``mask`` is False.
        """
        anchors = np.asarray(anchors, dtype=np.int64)
        if len(anchors) and (anchors.min() < 0 or anchors.max() >= size):
            raise UnknownEntityError(f"{kind} id outside the index")
        days = np.broadcast_to(np.asarray(days, dtype=np.int64), anchors.shape)
        start, end = side.window(anchors, days, self.n)
        pos = start[:, None] + np.arange(self.n)
        mask = pos < end[:, None]
        ids = np.where(mask, side.other[np.minimum(pos, max(len(side.other) - 1, 0))]
                       if len(side.other) else 0, 0)
        return ids, mask


def build_index(log: EventLog, n: int) -> HistoryIndex:
    return HistoryIndex(log, n)
