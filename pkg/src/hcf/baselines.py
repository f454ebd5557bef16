"""Benchmark recommenders: interaction counts and two static matrix factorizations."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import DivergenceError, UnknownEntityError
from .events import EventLog
from .model import (Gradients, RankingModel, TripletBatch, dot_matrix, scatter_rows, sigmoid,
                    softplus)


class HistoricalModel:
    """Scores a pair with its number of interactions in the training log."""

    kind = "historical"
    is_static = True

    def __init__(self, counts: sp.csr_matrix):
        self.counts = counts.tocsr()

    @property
    def n_users(self):
        return self.counts.shape[0]

    @property
    def n_items(self):
        return self.counts.shape[1]

    def score(self, u, i) -> float:
        if not (0 <= u < self.n_users and 0 <= i < self.n_items):
            raise UnknownEntityError(f"pair ({u}, {i}) outside the model's perimeter")
        return float(self.counts[u, i])

    def score_matrix(self, index, users, items, day=None):
        return self.counts[np.asarray(users)][:, np.asarray(items)].toarray().astype(np.float64)

    def copy(self):
        return HistoricalModel(self.counts.copy())

    def config(self):
        return {}


def interaction_counts(log: EventLog) -> sp.csr_matrix:
    data = np.ones(len(log), dtype=np.float64)
    m = sp.coo_matrix((data, (log.user, log.item)), shape=(log.n_users, log.n_items))
    return m.tocsr()  # duplicates are summed


def historical_fit(log: EventLog) -> HistoricalModel:
    return HistoricalModel(interaction_counts(log))


class MfModel(RankingModel):
    """Static factorization ``score(u, i) = <user_factors[u], item_factors[i]>``.

    The ``bpr`` variant is trained with the sampled pairwise loss (see
    :mod:`hcf.training`); the ``implicit`` variant with full-batch gradient
    descent on the confidence-weighted squared loss.
    """

    is_static = True

    def __init__(self, user_factors, item_factors, variant="bpr", l2=0.01, alpha_conf=40.0,
                 seed=None):
        if variant not in ("bpr", "implicit"):
            raise ValueError(f"unknown MF variant {variant!r}")
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.variant = variant
        self.l2 = float(l2)
        self.alpha_conf = float(alpha_conf)
        self.seed = seed

    @property
    def kind(self):
        return f"mf_{self.variant}"

    @property
    def d(self):
        return self.user_factors.shape[1]

    @property
    def n_users(self):
        return self.user_factors.shape[0]

    @property
    def n_items(self):
        return self.item_factors.shape[0]

    def params(self):
        return {"user_factors": self.user_factors, "item_factors": self.item_factors}

    def config(self):
        return {"variant": self.variant, "d": self.d, "l2": self.l2,
                "alpha_conf": self.alpha_conf, "seed": self.seed}

    def score(self, u, i) -> float:
        if not (0 <= u < self.n_users and 0 <= i < self.n_items):
            raise UnknownEntityError(f"pair ({u}, {i}) outside the model's perimeter")
        return float(self.user_factors[u] @ self.item_factors[i])

    def score_matrix(self, index, users, items, day=None):
        return dot_matrix(self.user_factors[np.asarray(users)], self.item_factors[np.asarray(items)])

    def loss_terms(self, index, batch: TripletBatch):
        U, V = self.user_factors, self.item_factors
        neg_u, neg_i = batch.negative_pairs()
        pu, pi, nu, ni = U[batch.user], V[batch.item], U[neg_u], V[neg_i]
        x = np.einsum("bd,bd->b", pu, pi) - np.einsum("bd,bd->b", nu, ni)
        # the negative replaces exactly one side, so regularize the anchor
        # pair plus the replacement
        item_side = (batch.side == TripletBatch.ITEM_SIDE)[:, None]
        extra = np.where(item_side, nu, ni)
        reg = (pu ** 2).sum(1) + (pi ** 2).sum(1) + (extra ** 2).sum(1)
        return x, self.l2 * reg

    def loss_and_grad(self, index, batch: TripletBatch, need_grad=True):
        """Mean over the batch of -ln sigmoid(pos - neg) + l2 * (squared norms of
        the three factor rows involved); histories play no part."""
        m = len(batch)
        U, V = self.user_factors, self.item_factors
        neg_u, neg_i = batch.negative_pairs()
        pu, pi, nu, ni = U[batch.user], V[batch.item], U[neg_u], V[neg_i]
        x, penalty = self.loss_terms(index, batch)
        item_side = (batch.side == TripletBatch.ITEM_SIDE)[:, None]
        loss = float((softplus(-x) + penalty).mean())
        if not need_grad:
            return loss, None, None
        g = (-sigmoid(-x) / m)[:, None]
        r = 2.0 * self.l2 / m
        s = item_side[:, 0]
        nU, nV = len(U), len(V)
        dU = scatter_rows(np.concatenate([batch.user, neg_u, batch.neg[s]]),
                          np.concatenate([g * pi + r * pu, -g * ni, r * nu[s]]), nU)
        dV = scatter_rows(np.concatenate([batch.item, neg_i, batch.neg[~s]]),
                          np.concatenate([g * pu + r * pi, -g * nu, r * ni[~s]]), nV)
        support = {"user_factors": np.unique(np.concatenate([batch.user, neg_u])),
                   "item_factors": np.unique(np.concatenate([batch.item, neg_i]))}
        return loss, Gradients({"user_factors": dU, "item_factors": dV}, support), None


def init_mf(num_users, num_items, d=32, variant="bpr", l2=0.01, alpha_conf=40.0, seed=0,
            std=0.1) -> MfModel:
    rng = np.random.default_rng(seed)
    return MfModel(rng.normal(0.0, std, (num_users, d)), rng.normal(0.0, std, (num_items, d)),
                   variant, l2, alpha_conf, seed)


def mf_bpr_score(model: MfModel, u, i) -> float:
    return model.score(u, i)


def implicit_targets(log: EventLog):
    """Preference and confidence matrices over the log's full user x item product."""
    r = interaction_counts(log).toarray()
    return (r > 0).astype(np.float64), r


def mf_implicit_loss(model: MfModel, pref, conf_counts, need_grad=True):
    """sum c_ui (p_ui - <x_u, y_i>)^2 + l2 (|X|^2 + |Y|^2) with c_ui = 1 + alpha r_ui."""
    X, Y = model.user_factors, model.item_factors
    c = 1.0 + model.alpha_conf * conf_counts
    # overflow surfaces as a non-finite loss, which callers check
    with np.errstate(over="ignore", invalid="ignore"):
        err = X @ Y.T - pref
        loss = float((c * err ** 2).sum() + model.l2 * ((X ** 2).sum() + (Y ** 2).sum()))
        if not need_grad:
            return loss, None
        ce = c * err
        grads = {"user_factors": 2.0 * ce @ Y + 2.0 * model.l2 * X,
                 "item_factors": 2.0 * ce.T @ X + 2.0 * model.l2 * Y}
    return loss, Gradients(grads)


def mf_implicit_step(model: MfModel, log: EventLog, lr: float, targets=None):
    """One full-gradient descent step; returns ``(model, loss before the step)``.

    ``targets`` may carry a precomputed ``implicit_targets(log)``.
    """
    if model.variant != "implicit":
        raise ValueError("mf_implicit_step needs an implicit-variant model")
    pref, r = targets if targets is not None else implicit_targets(log)
    loss, grads = mf_implicit_loss(model, pref, r)
    if not np.isfinite(loss):
        raise DivergenceError(f"MF-implicit loss became {loss}; lower the learning rate (lr={lr})")
    model.user_factors -= lr * grads["user_factors"]
    model.item_factors -= lr * grads["item_factors"]
    return model, loss
