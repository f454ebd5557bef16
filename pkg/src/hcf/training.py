"""Pairwise ranking training with the symmetric negative sampler."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (HistoricalModel, MfModel, historical_fit, implicit_targets, init_mf,
                        mf_implicit_loss, mf_implicit_step)
from .errors import ConfigError, DivergenceError
from .evaluation import MetricsReport, evaluate
from .events import EventLog, Perimeter, SyntheticConfig, generate_synthetic, perimeter_of
from .history import HistoryIndex
from .model import HcfModel, RankingModel, TripletBatch, init_model, sigmoid, softplus

_log = logging.getLogger(__name__)

TRACE_COLUMNS = ("epoch", "train_loss", "valid_map_u", "valid_map_i", "valid_map_sym", "seconds")
_REJECTION_ROUNDS = 64


def bpr_loss(pos_score, neg_score):
    """-ln sigmoid(pos - neg), evaluated as softplus(neg - pos)."""
    return softplus(np.asarray(neg_score, float) - np.asarray(pos_score, float))


def enumerate_positives(log: EventLog, rng=None):
    """One (t, u, i) triplet per event, duplicates kept; shuffled when ``rng`` is given."""
    order = np.arange(len(log)) if rng is None else rng.permutation(len(log))
    return log.t[order], log.user[order], log.item[order]


@dataclass
class SamplerStats:
    drawn: int = 0
    skipped: int = 0
    user_side: int = 0


def _day_keys(t, a, b, n_b):
    return (t * (np.int64(1) << 20) + a) * n_b + b


class NegativeSampler:
    """Draws negatives for positive triplets: for a user-side entry an item
    outside the user's strict-past history, for an item-side entry a user
    outside the item's strict-past history, with a fair coin between sides.

    Rejection sampling against the (short) histories, with explicit
    complement enumeration for small pools or stubborn rows.
    """

    def __init__(self, index: HistoryIndex, perimeter: Perimeter, same_day_log: EventLog = None):
        self.index = index
        self.users = perimeter.users
        self.items = perimeter.items
        self.stats = SamplerStats()
        self._day_pos = None
        if same_day_log is not None:
            n_i, n_u = max(same_day_log.n_items, 1), max(same_day_log.n_users, 1)
            self._n = (n_u, n_i)
            self._day_pos = (
                np.unique(_day_keys(same_day_log.t, same_day_log.user, same_day_log.item, n_i)),
                np.unique(_day_keys(same_day_log.t, same_day_log.item, same_day_log.user, n_u)))

    def exclusions(self, t, anchor, side):
        """Padded exclusion ids and mask for each entry (history of the anchor)."""
        uh, um = self.index.user_batch(np.where(side == 0, anchor, 0), t)
        ih, im = self.index.item_batch(np.where(side == 1, anchor, 0), t)
        s = (side == 0)[:, None]
        return np.where(s, uh, ih), np.where(s, um, im)

    def _same_day_hit(self, t, anchor, cand, side):
        if self._day_pos is None:
            return np.zeros(len(t), dtype=bool)
        n_u, n_i = self._n
        hit = np.zeros(len(t), dtype=bool)
        s = side == 0
        hit[s] = np.isin(_day_keys(t[s], anchor[s], cand[s], n_i), self._day_pos[0])
        hit[~s] = np.isin(_day_keys(t[~s], anchor[~s], cand[~s], n_u), self._day_pos[1])
        return hit

    def _draw(self, side, rng):
        k = np.where(side == 0, len(self.items), len(self.users))
        pick = np.floor(rng.random(len(side)) * k).astype(np.int64)
        return np.where(side == 0, self.items[np.minimum(pick, len(self.items) - 1)],
                        self.users[np.minimum(pick, len(self.users) - 1)])

    def _invalid(self, t, anchor, side, cand, excl, mask):
        return np.any((excl == cand[:, None]) & mask, axis=1) | \
            self._same_day_hit(t, anchor, cand, side)

    def sample(self, t, user, item, rng) -> TripletBatch:
        """Negatives for positive triplets; entries with an empty candidate set are dropped."""
        t, user, item = (np.asarray(a, dtype=np.int64) for a in (t, user, item))
        m = len(t)
        side = rng.integers(2, size=m)
        anchor = np.where(side == 0, user, item)
        excl, mask = self.exclusions(t, anchor, side)
        pool = np.where(side == 0, len(self.items), len(self.users))
        neg = self._draw(side, rng)
        explicit = pool <= 2 * self.index.n
        bad = self._invalid(t, anchor, side, neg, excl, mask) & ~explicit
        rounds = 0
        while bad.any() and rounds < _REJECTION_ROUNDS:
            rows = np.flatnonzero(bad)
            neg[rows] = self._draw(side[rows], rng)
            bad[rows] = self._invalid(t[rows], anchor[rows], side[rows], neg[rows], excl[rows],
                                      mask[rows])
            rounds += 1
        keep = np.ones(m, dtype=bool)
        for r in np.flatnonzero(explicit | bad):
            cands = self.items if side[r] == 0 else self.users
            ok = ~np.isin(cands, excl[r][mask[r]])
            ok &= ~self._same_day_hit(np.full(len(cands), t[r]), np.full(len(cands), anchor[r]),
                                      cands, np.full(len(cands), side[r]))
            if not ok.any():
                keep[r] = False
                continue
            choices = cands[ok]
            neg[r] = choices[min(int(rng.random() * len(choices)), len(choices) - 1)]
        self.stats.drawn += int(keep.sum())
        self.stats.skipped += int((~keep).sum())
        self.stats.user_side += int((side[keep] == 0).sum())
        return TripletBatch(t[keep], user[keep], item[keep], neg[keep], side[keep])

    def violations(self, batch: TripletBatch) -> int:
        """Entries whose negative lies in the exclusion set it was drawn against."""
        anchor = np.where(batch.side == 0, batch.user, batch.item)
        excl, mask = self.exclusions(batch.t, anchor, batch.side)
        return int(self._invalid(batch.t, anchor, batch.side, batch.neg, excl, mask).sum())


def sample_negative(pos, index: HistoryIndex, perimeter: Perimeter, rng):
    """Negative for one positive ``(t, u, i)``: a ``(t, u, i, neg, side)`` tuple or None."""
    t, u, i = pos
    batch = NegativeSampler(index, perimeter).sample([t], [u], [i], rng)
    if not len(batch):
        return None
    return tuple(int(getattr(batch, k)[0]) for k in ("t", "user", "item", "neg", "side"))


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.steps = {}, {}, 0

    def step(self, params, grads):
        self.steps += 1
        c1 = 1 - self.beta1 ** self.steps
        c2 = 1 - self.beta2 ** self.steps
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=1e-3):
        if lr <= 0:
            raise ConfigError("learning rate must be > 0")
        self.lr, self.steps = lr, 0

    def step(self, params, grads):
        self.steps += 1
        for name, p in params.items():
            p -= self.lr * grads[name]


def make_optimizer(kind, lr):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 256
    negatives: int = 1
    max_epochs: int = 200
    patience: int = 5
    embedding_l2: float = 0.0
    exclude_same_day_positives: bool = False
    implicit_steps: int = 10
    n: int = 20
    seed: int = 0
    check_sampler: bool = False


class EarlyStopping:
    """Keeps the best validation snapshot; signals a stop after ``patience``
    epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_epoch = 0
        self.best_snapshot = None

    def update(self, epoch, score, model) -> bool:
        if score > self.best_score:
            self.best_score, self.best_epoch = score, epoch
            self.best_snapshot = model.copy()
        return epoch - self.best_epoch >= self.patience


@dataclass
class FitResult:
    model: object
    trace: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    valid: MetricsReport | None = None
    sampler: SamplerStats | None = None


def validation_setup(train_log: EventLog, eval_log: EventLog, n: int):
    """Eval log keyed in the training id space, its days, and the history
    index over train + eval events (restricted to the training perimeter)."""
    if not eval_log.is_empty and not train_log.is_empty and eval_log.t[0] <= train_log.t[-1]:
        raise ConfigError("evaluation events must lie strictly after the training window")
    keyed = eval_log.reindex(train_log)
    index = HistoryIndex(EventLog.concat([train_log, keyed]), n)
    return keyed, np.unique(keyed.t), index


def history_n(model, cfg: TrainConfig) -> int:
    return model.n if isinstance(model, HcfModel) else cfg.n


def _epoch_ranking(model: RankingModel, train_log, index, sampler, opt, cfg, rng):
    t, u, i = enumerate_positives(train_log, rng)
    if cfg.negatives > 1:
        t, u, i = (np.repeat(a, cfg.negatives) for a in (t, u, i))
    total, count = 0.0, 0
    for start in range(0, len(t), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        batch = sampler.sample(t[sl], u[sl], i[sl], rng)
        if not len(batch):
            continue
        if cfg.check_sampler:
            bad = sampler.violations(batch)
            assert bad == 0, f"{bad} sampled negatives violate their exclusion set"
        loss, grads, _ = model.loss_and_grad(index, batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became {loss}; lower the learning rate")
        params = model.params()
        if cfg.embedding_l2:
            for name in params:
                if name.endswith(("_emb", "_factors")):
                    grads.arrays[name] += cfg.embedding_l2 * params[name]
        opt.step(params, grads.arrays)
        total += loss * len(batch)
        count += len(batch)
    return total / max(count, 1)


def _epoch_implicit(model: MfModel, train_log, targets, cfg):
    loss = 0.0
    for _ in range(cfg.implicit_steps):
        _, loss = mf_implicit_step(model, train_log, cfg.lr, targets)
    return loss


def fit(model, train_log: EventLog, valid_log: EventLog | None, cfg: TrainConfig,
        epochs: int | None = None, trace_path=None) -> FitResult:
    """Train ``model`` (sized to ``train_log``'s vocabulary) in place.

    With ``valid_log`` the run early-stops on validation symmetrized mAP and
    returns the best snapshot; with ``epochs`` it runs exactly that many
    epochs and skips validation.  Training histories come from
    ``train_log`` only.
    """
    if isinstance(model, HistoricalModel):
        model = historical_fit(train_log)
        res = FitResult(model, best_epoch=1, epochs_run=1)
        if valid_log is not None and epochs is None:
            keyed, days, vindex = validation_setup(train_log, valid_log, cfg.n)
            res.valid = evaluate(model, vindex, keyed, days, perimeter_of(train_log))
        return res

    rng = np.random.default_rng(cfg.seed)
    n = history_n(model, cfg)
    perimeter = Perimeter(np.arange(train_log.n_users), np.arange(train_log.n_items))
    validate = valid_log is not None and epochs is None
    if validate:
        keyed, days, vindex = validation_setup(train_log, valid_log, n)
    implicit = isinstance(model, MfModel) and model.variant == "implicit"
    if implicit:
        opt_targets = implicit_targets(train_log)
    else:
        index = HistoryIndex(train_log, n)
        sampler = NegativeSampler(index, perimeter,
                                  train_log if cfg.exclude_same_day_positives else None)
        opt = make_optimizer(cfg.optimizer, cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    max_epochs = epochs if epochs is not None else cfg.max_epochs
    res = FitResult(model)
    writer = _TraceWriter(trace_path)
    for epoch in range(1, max_epochs + 1):
        started = time.perf_counter()
        if implicit:
            loss = _epoch_implicit(model, train_log, opt_targets, cfg)
        else:
            loss = _epoch_ranking(model, train_log, index, sampler, opt, cfg, rng)
        row = {"epoch": epoch, "train_loss": loss}
        stop = False
        if validate:
            report = evaluate(model, vindex, keyed, days, perimeter)
            row.update(valid_map_u=report.map_user, valid_map_i=report.map_item,
                       valid_map_sym=report.map_sym)
            stop = stopper.update(epoch, report.map_sym, model)
            if stopper.best_epoch == epoch:
                res.valid = report
        row["seconds"] = time.perf_counter() - started
        res.trace.append(row)
        writer.write(row)
        _log.debug("epoch %d: %s", epoch, row)
        if stop:
            break
    writer.close()
    res.epochs_run = len(res.trace)
    if validate:
        res.model, res.best_epoch = stopper.best_snapshot, stopper.best_epoch
    else:
        res.model, res.best_epoch = model, res.epochs_run
    if not implicit:
        res.sampler = sampler.stats
    return res


class _TraceWriter:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            self.fh = Path(path).open("w", newline="")
            self.w = csv.writer(self.fh, lineterminator="\n")
            self.w.writerow(TRACE_COLUMNS)

    def write(self, row):
        if self.fh:
            self.w.writerow([row.get(c, "") for c in TRACE_COLUMNS])

    def close(self):
        if self.fh:
            self.fh.close()


# gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    skipped_nondifferentiable: int
    worst: tuple | None = None


def _relative_error(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _ranking_loss_difference(plus, minus):
    """``mean(softplus(-x+) + p+) - mean(softplus(-x-) + p-)`` without
    subtracting two numbers near ln 2, via
    softplus(-a) - softplus(-b) = log1p(sigmoid(-b) * expm1(b - a))."""
    (xp, pp), (xm, pm) = plus, minus
    return float(np.mean(np.log1p(sigmoid(-xm) * np.expm1(xm - xp)) + (pp - pm)))


def grad_check_report(model, batch, epsilon=1e-5, index=None) -> GradCheckReport:
    """Compare analytic gradients with central differences on every
    parameter in the batch's support.

    ``batch`` is a :class:`TripletBatch` for ranking models and an
    :class:`EventLog` for the implicit MF variant.  Coordinates where a
    +/-epsilon step flips a ReLU are not differentiable there and are
    counted but not compared.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    if isinstance(model, MfModel) and model.variant == "implicit":
        targets = implicit_targets(batch)
        loss_fn = lambda: mf_implicit_loss(model, *targets, need_grad=False)[0]
        difference = lambda a, b: a - b
        grads = mf_implicit_loss(model, *targets)[1]
        pattern = None
    else:
        loss_fn = lambda: model.loss_terms(index, batch)
        difference = _ranking_loss_difference
        grads = model.loss_and_grad(index, batch)[1]
        pattern = (lambda: model.activation_pattern(index, batch)) \
            if isinstance(model, HcfModel) else None
    base_pattern = pattern() if pattern else None
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for name, p in model.params().items():
        g = grads[name]
        if name in grads.support:
            coords = [(r, c) for r in grads.support[name] for c in range(p.shape[1])]
        else:
            coords = list(np.ndindex(p.shape))
        for pos in coords:
            orig = p[pos]
            p[pos] = orig + epsilon
            f_plus = loss_fn()
            flip = pattern is not None and not np.array_equal(pattern(), base_pattern)
            p[pos] = orig - epsilon
            f_minus = loss_fn()
            flip = flip or (pattern is not None and not np.array_equal(pattern(), base_pattern))
            p[pos] = orig
            if flip:
                skipped += 1
                continue
            numeric = difference(f_plus, f_minus) / (2 * epsilon)
            if g[pos] == 0 and numeric == 0:
                continue
            err = _relative_error(g[pos], numeric)
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, pos, float(g[pos]), numeric)
    return GradCheckReport(worst, checked, skipped, worst_at)


def grad_check(model, batch, epsilon=1e-5, index=None) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(model, batch, epsilon, index).max_error


def grad_check_suite(seeds=20, epsilon=1e-5, d=8, hidden=(8, 8), n=4, l2=0.05):
    """Worst :class:`GradCheckReport` per model kind over small random logs,
    one log and one initialization per seed."""
    worst = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        log = generate_synthetic(SyntheticConfig(num_users=6, num_items=9, latent_dim=3,
                                                 events_per_day=4, num_days=10,
                                                 temperature=1.0, drift_std=0.1, seed=seed))
        index = HistoryIndex(log, n)
        sampler = NegativeSampler(index, perimeter_of(log))
        pick = rng.choice(len(log), min(4, len(log)), replace=False)
        batch = sampler.sample(log.t[pick], log.user[pick], log.item[pick], rng)
        reports = {
            "hcf": grad_check_report(init_model(log.n_users, log.n_items, d, hidden, n, seed),
                                     batch, epsilon, index),
            "mf_bpr": grad_check_report(init_mf(log.n_users, log.n_items, d, "bpr", l2,
                                                seed=seed), batch, epsilon, index),
            "mf_implicit": grad_check_report(init_mf(log.n_users, log.n_items, d, "implicit",
                                                     l2, seed=seed), log, epsilon),
        }
        for kind, rep in reports.items():
            if kind not in worst or rep.max_error > worst[kind].max_error:
                worst[kind] = rep
    return worst
