"""History-augmented collaborative filtering network.

Each side (user, item) owns a static embedding table and a block of
kernel-1 convolutions.  A block sees two channels per embedding component,
the entity's static embedding and the mean embedding of its recent
counterparts, and mixes channels with weights shared across components, so
component ``l`` of the output depends on component ``l`` of the inputs only.
The score of a (user, item) pair on day t is the dot product of the two
dynamic embeddings.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import UnknownEntityError
from .history import HistoryIndex

EMBEDDING_STD = 0.1


def softplus(x):
    """ln(1 + e^x) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class ConvBlock:
    """Stack of kernel-1 convolutions; ReLU on hidden layers, identity on the output.

    ``weights[k]`` has shape ``(c_out, c_in)``; the first layer reads the
    two channels (static, history) and the last writes one.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("a block needs one bias per weight matrix and at least one layer")
        c_in = 2
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != c_in or b.shape != (w.shape[0],):
                raise ValueError(f"layer shape mismatch: {w.shape} / {b.shape} after {c_in} channels")
            c_in = w.shape[0]
        if c_in != 1:
            raise ValueError("the last layer must produce a single channel")

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    @classmethod
    def init(cls, hidden: Sequence[int], rng) -> ConvBlock:
        sizes = [2, *hidden, 1]
        weights, biases = [], []
        for c_in, c_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (c_in + c_out))
            weights.append(rng.uniform(-limit, limit, size=(c_out, c_in)))
            biases.append(np.zeros(c_out))
        return cls(weights, biases)

    def forward(self, static, history):
        """Apply the block to ``(..., d)`` inputs; returns ``(output, cache)``.

        Channels are laid out as rows of a ``(channels, everything else)``
        matrix, so every layer is one matrix product.
        """
        static = np.asarray(static, dtype=np.float64)
        shape = static.shape
        c = np.stack([static.ravel(), np.asarray(history, dtype=np.float64).ravel()])
        cache = [c]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ c + b[:, None]
            c = z if k == last else np.maximum(z, 0.0)
            cache.append(c)
        return c[0].reshape(shape), cache

    def backward(self, cache, grad_out):
        """Gradients w.r.t. static input, history input, weights and biases."""
        shape = grad_out.shape
        g = grad_out.reshape(1, -1)
        dw, db = [None] * len(self.weights), [None] * len(self.weights)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                g = g * (cache[k + 1] > 0)
            dw[k] = g @ cache[k].T
            db[k] = g.sum(axis=1)
            g = self.weights[k].T @ g
        return g[0].reshape(shape), g[1].reshape(shape), dw, db

    def activation_pattern(self, cache):
        return np.concatenate([(c > 0).ravel() for c in cache[1:-1]]) if len(cache) > 2 \
            else np.zeros(0, dtype=bool)


def block_forward(block: ConvBlock, static, history):
    return block.forward(np.asarray(static, float), np.asarray(history, float))[0]


def pool_history(ids: Sequence[int], table: np.ndarray) -> np.ndarray:
    """Mean of the table rows listed in ``ids``; the zero vector when ``ids`` is empty."""
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        return np.zeros(table.shape[1])
    return table[ids].mean(axis=0)


def _pooling_matrix(ids, mask, n_rows):
    """Sparse ``(batch, n_rows)`` matrix whose product with a table averages
    each row's history; its transpose scatters gradients back to the table."""
    count = mask.sum(axis=1)
    rows = np.broadcast_to(np.arange(len(ids))[:, None], ids.shape)[mask]
    weight = (1.0 / np.maximum(count, 1))[rows]
    return sp.csr_matrix((weight, (rows, ids[mask])), shape=(len(ids), n_rows)), count


@dataclass
class _Pass:
    """Intermediate values of one side's forward pass over a batch."""

    anchors: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    pooling: sp.csr_matrix
    out: np.ndarray
    cache: list


@dataclass
class Gradients:
    """Dense gradient arrays keyed like ``model.params()``, plus the touched rows."""

    arrays: dict[str, np.ndarray]
    support: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def rows(self, name):
        """Nonzero gradient rows of an embedding table as ``{row: vector}``."""
        a = self.arrays[name]
        return {int(r): a[r] for r in self.support.get(name, np.flatnonzero(np.any(a != 0, axis=1)))}


@dataclass(frozen=True)
class TripletBatch:
    """Positive pairs with one sampled negative each.

    ``side`` is 0 for a user-side entry, whose ``neg`` is an item replacing
    ``item``, and 1 for an item-side entry, whose ``neg`` is a user
    replacing ``user``.
    """

    t: np.ndarray
    user: np.ndarray
    item: np.ndarray
    neg: np.ndarray
    side: np.ndarray

    USER_SIDE = 0
    ITEM_SIDE = 1

    def __len__(self):
        return len(self.t)

    @classmethod
    def of(cls, entries) -> TripletBatch:
        """From ``(t, user, item, neg, side)`` tuples."""
        a = np.asarray(list(entries), dtype=np.int64).reshape(-1, 5)
        return cls(*(a[:, k].copy() for k in range(5)))

    def take(self, sel) -> TripletBatch:
        return TripletBatch(self.t[sel], self.user[sel], self.item[sel], self.neg[sel], self.side[sel])

    def negative_pairs(self):
        item_side = self.side == self.ITEM_SIDE
        return np.where(item_side, self.neg, self.user), np.where(item_side, self.item, self.neg)


class RankingModel:
    """Shared machinery for models trained with the sampled pairwise ranking loss."""

    kind = "abstract"
    is_static = False

    def params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def loss(self, index: HistoryIndex, batch: TripletBatch) -> float:
        return self.loss_and_grad(index, batch, need_grad=False)[0]

    def loss_and_grad(self, index, batch, need_grad=True):
        raise NotImplementedError


class HcfModel(RankingModel):
    kind = "hcf"

    def __init__(self, user_emb, item_emb, user_block: ConvBlock, item_block: ConvBlock, n: int,
                 seed=None, stop_history_grad=False):
        if user_emb.shape[1] != item_emb.shape[1]:
            raise ValueError("user and item embeddings differ in dimension")
        if user_block.shapes != item_block.shapes:
            raise ValueError("user and item blocks must have identical layer shapes")
        self.user_emb = np.asarray(user_emb, dtype=np.float64)
        self.item_emb = np.asarray(item_emb, dtype=np.float64)
        self.user_block = user_block
        self.item_block = item_block
        self.n = int(n)
        self.seed = seed
        self.stop_history_grad = stop_history_grad

    @property
    def d(self):
        return self.user_emb.shape[1]

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    @property
    def hidden(self):
        return [w.shape[0] for w in self.user_block.weights[:-1]]

    def params(self):
        p = {"user_emb": self.user_emb, "item_emb": self.item_emb}
        for side, block in (("user", self.user_block), ("item", self.item_block)):
            for k, (w, b) in enumerate(zip(block.weights, block.biases)):
                p[f"{side}_block.w{k}"] = w
                p[f"{side}_block.b{k}"] = b
        return p

    def config(self):
        return {"n": self.n, "d": self.d, "hidden": self.hidden, "seed": self.seed,
                "stop_history_grad": self.stop_history_grad}

    def mirrored(self) -> HcfModel:
        """The model with user and item roles swapped, for a transposed log."""
        return HcfModel(self.item_emb.copy(), self.user_emb.copy(), copy.deepcopy(self.item_block),
                        copy.deepcopy(self.user_block), self.n, self.seed, self.stop_history_grad)

    # forward -----------------------------------------------------------

    def _side(self, side):
        if side == "user":
            return self.user_emb, self.item_emb, self.user_block
        return self.item_emb, self.user_emb, self.item_block

    def _forward(self, index: HistoryIndex, side, anchors, days) -> _Pass:
        static, other, block = self._side(side)
        anchors = np.asarray(anchors, dtype=np.int64)
        if len(anchors) and (anchors.min() < 0 or anchors.max() >= len(static)):
            raise UnknownEntityError(f"{side} id outside the model's perimeter")
        batch = index.user_batch if side == "user" else index.item_batch
        ids, mask = batch(anchors, days)
        pooling, _ = _pooling_matrix(ids, mask, len(other))
        out, cache = block.forward(static[anchors], pooling @ other)
        return _Pass(anchors, ids, mask, pooling, out, cache)

    def dynamic_users(self, index, users, days):
        return self._forward(index, "user", users, days).out

    def dynamic_items(self, index, items, days):
        return self._forward(index, "item", items, days).out

    def dynamic_user(self, index, u, t):
        return self.dynamic_users(index, [u], [t])[0]

    def dynamic_item(self, index, i, t):
        return self.dynamic_items(index, [i], [t])[0]

    def score(self, index, u, i, t) -> float:
        return float(np.dot(self.dynamic_user(index, u, t), self.dynamic_item(index, i, t)))

    def score_matrix(self, index, users, items, day):
        """Scores of every (user, item) pair of the given lists on ``day``."""
        xu = self.dynamic_users(index, users, np.full(len(users), day))
        xi = self.dynamic_items(index, items, np.full(len(items), day))
        return dot_matrix(xu, xi)

    # backward ----------------------------------------------------------

    def _margins(self, index, batch: TripletBatch):
        m = len(batch)
        neg_u, neg_i = batch.negative_pairs()
        days = np.concatenate([batch.t, batch.t])
        up = self._forward(index, "user", np.concatenate([batch.user, neg_u]), days)
        ip = self._forward(index, "item", np.concatenate([batch.item, neg_i]), days)
        s = np.einsum("bd,bd->b", up.out, ip.out)
        return s[:m] - s[m:], up, ip

    def loss_terms(self, index, batch):
        """Per-entry margins ``pos - neg`` and penalties; the loss is
        ``mean(softplus(-margin) + penalty)``."""
        x = self._margins(index, batch)[0]
        return x, np.zeros_like(x)

    def loss_and_grad(self, index, batch: TripletBatch, need_grad=True):
        """Mean of -ln sigmoid(pos - neg) over the batch, and its exact gradient."""
        m = len(batch)
        x, up, ip = self._margins(index, batch)
        xu, xi = up.out, ip.out
        loss = float(softplus(-x).mean())
        if not need_grad:
            return loss, None, (up, ip)
        g = -sigmoid(-x) / m
        gs = np.concatenate([g, -g])
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        support = {}
        for side, p, dout in (("user", up, gs[:, None] * xi), ("item", ip, gs[:, None] * xu)):
            _, _, block = self._side(side)
            other = "item" if side == "user" else "user"
            d_static, d_hist, dw, db = block.backward(p.cache, dout)
            grads[f"{side}_emb"] += scatter_rows(p.anchors, d_static, len(grads[f"{side}_emb"]))
            if not self.stop_history_grad:
                grads[f"{other}_emb"] += p.pooling.T @ d_hist
            for k in range(len(dw)):
                grads[f"{side}_block.w{k}"] += dw[k]
                grads[f"{side}_block.b{k}"] += db[k]
        support["user_emb"] = np.unique(np.concatenate([up.anchors, ip.ids[ip.mask]]))
        support["item_emb"] = np.unique(np.concatenate([ip.anchors, up.ids[up.mask]]))
        return loss, Gradients(grads, support), (up, ip)

    def activation_pattern(self, index, batch):
        _, _, (up, ip) = self.loss_and_grad(index, batch, need_grad=False)
        return np.concatenate([self.user_block.activation_pattern(up.cache),
                               self.item_block.activation_pattern(ip.cache)])

    def backward(self, index, quad, side) -> Gradients:
        """Gradient of the loss of a single sampled quadruple.

        ``quad`` is ``(t, u, i, j)`` for a user-side sample (j a negative
        item) and ``(t, u, v, i)`` for an item-side one (v a negative user).
        """
        t, a, b, c = quad
        if side == "user":
            entry = (t, a, b, c, TripletBatch.USER_SIDE)
        else:
            entry = (t, a, c, b, TripletBatch.ITEM_SIDE)
        return self.loss_and_grad(index, TripletBatch.of([entry]))[1]


def scatter_rows(rows, values, n_rows):
    """Dense ``(n_rows, d)`` array with ``values[k]`` summed into row ``rows[k]``."""
    m = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))),
                      shape=(n_rows, len(rows)))
    return m @ values


def dot_matrix(a, b):
    """``a @ b.T`` with one fixed summation order per entry, so that
    ``dot_matrix(b, a)`` is bitwise the transpose of ``dot_matrix(a, b)``."""
    return np.einsum("ud,id->ui", a, b, optimize=False)


def init_model(num_users, num_items, d=32, hidden=(8, 8), n=20, seed=0,
               stop_history_grad=False) -> HcfModel:
    """Random HCF model: N(0, 0.1) embeddings, Glorot-uniform convolutions, zero biases."""
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    user_emb = rng.normal(0.0, EMBEDDING_STD, size=(num_users, d))
    item_emb = rng.normal(0.0, EMBEDDING_STD, size=(num_items, d))
    user_block = ConvBlock.init(hidden, rng)
    item_block = ConvBlock.init(hidden, rng)
    return HcfModel(user_emb, item_emb, user_block, item_block, n, seed, stop_history_grad)


def dynamic_user(model: HcfModel, index, u, t):
    return model.dynamic_user(index, u, t)


def dynamic_item(model: HcfModel, index, i, t):
    return model.dynamic_item(index, i, t)


def score(model, index, u, i, t):
    return model.score(index, u, i, t)


def backward(model: HcfModel, index, quad, side):
    return model.backward(index, quad, side)
