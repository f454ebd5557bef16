"""Experiment configuration and the window-size, sliding-retrain and search studies."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .baselines import historical_fit, init_mf
from .errors import ConfigError, DataError
from .evaluation import MetricsReport, evaluate
from .events import (EventLog, SyntheticConfig, TemporalSplit, generate_synthetic, ingest_csv,
                     perimeter_of, slice_window, write_csv)
from .model import init_model
from .training import TrainConfig, fit, validation_setup

_log = logging.getLogger(__name__)

MODEL_KINDS = ("hcf", "mf_bpr", "mf_implicit", "historical")
DEFAULT_WINDOWS = (7, 30, 60, 90, 180, 365)


# configuration ------------------------------------------------------------

@dataclass
class RunSection:
    model: str = "hcf"
    seed: int = 0


@dataclass
class DataSection:
    csv: typing.Optional[str] = None


@dataclass
class SplitSection:
    """Day ranges; unset bounds default to the trailing ``valid_days`` and
    ``test_days`` of the data with everything before them for training."""

    valid_days: int = 30
    test_days: int = 30
    train_start: typing.Optional[int] = None
    train_end: typing.Optional[int] = None
    valid_start: typing.Optional[int] = None
    valid_end: typing.Optional[int] = None
    test_start: typing.Optional[int] = None
    test_end: typing.Optional[int] = None


@dataclass
class ModelParams:
    d: int = 32
    n: int = 20
    hidden: tuple[int, ...] = (8, 8)
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 256
    negatives: int = 1
    max_epochs: int = 200
    patience: int = 5
    embedding_l2: float = 0.0
    l2: float = 0.01
    alpha_conf: float = 40.0
    implicit_steps: int = 10
    init_std: float = 0.1
    exclude_same_day_positives: bool = False
    stop_history_grad: bool = False


def _mf_implicit_defaults():
    return ModelParams(optimizer="sgd", lr=1e-4)


@dataclass
class SweepSection:
    windows: tuple[int, ...] = DEFAULT_WINDOWS
    models: tuple[str, ...] = ()


@dataclass
class SlideSection:
    models: tuple[str, ...] = ("historical", "mf_implicit", "mf_bpr", "hcf")
    window: typing.Optional[int] = None
    epochs: typing.Optional[int] = None
    slide_hcf: bool = False
    warm_start: bool = False


@dataclass
class SearchSection:
    trials: int = 10
    window: int = 90
    space: str = "lr=log:1e-4:3e-2;d=int:8:64;l2=log:1e-5:1e-1"


@dataclass
class TrainSection:
    window: typing.Optional[int] = None


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    split: SplitSection = field(default_factory=SplitSection)
    hcf: ModelParams = field(default_factory=ModelParams)
    mf_bpr: ModelParams = field(default_factory=ModelParams)
    mf_implicit: ModelParams = field(default_factory=_mf_implicit_defaults)
    sweep: SweepSection = field(default_factory=SweepSection)
    slide: SlideSection = field(default_factory=SlideSection)
    search: SearchSection = field(default_factory=SearchSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        for kind in (self.run.model, *self.sweep.models, *self.slide.models):
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
        if any(w < 7 for w in self.sweep.windows):
            raise ConfigError("window sizes must be >= 7 days")

    def params(self, kind) -> ModelParams:
        return getattr(self, kind) if kind != "historical" else self.hcf

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> ExperimentConfig:
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                cfg = cfg.replace(f"{section}.{key}", value)
        return cfg

    def replace(self, key: str, value) -> ExperimentConfig:
        """A copy with one ``section.field`` set; strings are parsed to the field type."""
        try:
            section, name = key.split(".", 1)
            sec = getattr(self, section)
            hints = typing.get_type_hints(type(sec))
            hint = hints[name]
        except (ValueError, AttributeError, KeyError):
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            new_sec = dataclasses.replace(sec, **{name: coerce(value, hint)})
            return dataclasses.replace(self, **{section: new_sec})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}")

    @classmethod
    def fields(cls):
        """Every ``section.field`` key with its type."""
        out = []
        for f in dataclasses.fields(cls):
            hints = typing.get_type_hints(f.default_factory().__class__)
            out += [(f"{f.name}.{g.name}", hints[g.name])
                    for g in dataclasses.fields(f.default_factory())]
        return out


def coerce(value, hint):
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)][0]
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
            return None
        return coerce(value, inner)
    if origin in (tuple, list):
        item = args[0]
        if isinstance(value, str):
            value = [v for v in (s.strip() for s in value.split(",")) if v]
        return tuple(coerce(v, item) for v in value)
    if hint is bool:
        if isinstance(value, str):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if hint is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if hint is float:
        return float(value)
    return str(value)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg = cfg.replace(key, value)
    return cfg


def load_config(path, base=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config_text(text, base)


# data ---------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> EventLog:
    if cfg.data.csv:
        return ingest_csv(cfg.data.csv)
    return generate_synthetic(cfg.synth)


def data_fingerprint(cfg: ExperimentConfig, log: EventLog) -> str:
    h = hashlib.sha256()
    if cfg.data.csv:
        h.update(Path(cfg.data.csv).read_bytes())
    else:
        for a in (log.t, log.user, log.item):
            h.update(np.ascontiguousarray(a, dtype="<i8").tobytes())
        h.update("\n".join(log.user_ids.tolist() + log.item_ids.tolist()).encode())
    return h.hexdigest()


def resolve_split(cfg: ExperimentConfig, log: EventLog) -> TemporalSplit:
    if log.is_empty:
        raise DataError("no events")
    s = cfg.split
    first, last = log.day_range
    test_end = s.test_end if s.test_end is not None else last
    test_start = s.test_start if s.test_start is not None else test_end - s.test_days + 1
    valid_end = s.valid_end if s.valid_end is not None else test_start - 1
    valid_start = s.valid_start if s.valid_start is not None else valid_end - s.valid_days + 1
    train_end = s.train_end if s.train_end is not None else valid_start - 1
    train_start = s.train_start if s.train_start is not None else first
    return TemporalSplit((train_start, train_end), (valid_start, valid_end), (test_start, test_end))


class LeakageError(AssertionError):
    pass


class DataAccess:
    """Hands out windows of the corpus, refusing test-period days until
    :meth:`open_test` is called.  Every read is logged in ``reads``."""

    def __init__(self, log: EventLog, split: TemporalSplit):
        self.log = log
        self.split = split
        self.test_open = False
        self.reads: list[tuple[int, int, str]] = []

    def days(self, start, end, purpose="train") -> EventLog:
        if end >= self.split.test[0] and not self.test_open:
            raise LeakageError(f"{purpose} read of days [{start}, {end}] touches the test period")
        self.reads.append((start, end, purpose))
        return self.log.days(start, end)

    def window(self, end_day, size, purpose="train") -> EventLog:
        return self.days(end_day - size + 1, end_day, purpose)

    def open_test(self):
        self.test_open = True


# models -------------------------------------------------------------------

def train_config(p: ModelParams, seed: int) -> TrainConfig:
    return TrainConfig(lr=p.lr, optimizer=p.optimizer, batch_size=p.batch_size,
                       negatives=p.negatives, max_epochs=p.max_epochs, patience=p.patience,
                       embedding_l2=p.embedding_l2,
                       exclude_same_day_positives=p.exclude_same_day_positives,
                       implicit_steps=p.implicit_steps, n=p.n, seed=seed)


def build_model(kind: str, p: ModelParams, train_log: EventLog, seed: int):
    nu, ni = train_log.n_users, train_log.n_items
    if kind == "hcf":
        return init_model(nu, ni, p.d, p.hidden, p.n, seed, p.stop_history_grad)
    if kind == "mf_bpr":
        return init_mf(nu, ni, p.d, "bpr", p.l2, p.alpha_conf, seed, p.init_std)
    if kind == "mf_implicit":
        return init_mf(nu, ni, p.d, "implicit", p.l2, p.alpha_conf, seed, p.init_std)
    if kind == "historical":
        return historical_fit(train_log)
    raise ConfigError(f"unknown model kind {kind!r}")


def train_model(kind, p: ModelParams, train_log, valid_log, seed, epochs=None, trace_path=None):
    if train_log.is_empty:
        raise DataError("empty training window")
    model = build_model(kind, p, train_log, seed)
    return fit(model, train_log, valid_log, train_config(p, seed), epochs=epochs,
               trace_path=trace_path)


def score_period(model, p: ModelParams, train_log: EventLog, eval_log: EventLog) -> MetricsReport:
    """Evaluate a frozen model on every day of ``eval_log`` with histories
    from the training window plus earlier evaluation days."""
    keyed, days, index = validation_setup(train_log, eval_log, p.n)
    return evaluate(model, index, keyed, days, perimeter_of(train_log))


# window sweep -------------------------------------------------------------

@dataclass
class SweepRow:
    model: str
    window_days: int
    valid: MetricsReport
    test: MetricsReport | None
    epochs: int
    epochs_run: int
    truncated: bool
    seconds: float = 0.0

    @property
    def valid_map_sym(self):
        return self.valid.map_sym

    @property
    def test_map_sym(self):
        return self.test.map_sym if self.test is not None else float("nan")


@dataclass
class SweepResult:
    rows: list[SweepRow]
    split: TemporalSplit
    models: dict = field(default_factory=dict, repr=False)

    def best(self, kind) -> SweepRow:
        rows = [r for r in self.rows if r.model == kind]
        return max(rows, key=lambda r: (r.valid_map_sym, -r.window_days))

    def curve(self, kind, which="valid"):
        return {r.window_days: (r.valid_map_sym if which == "valid" else r.test_map_sym)
                for r in self.rows if r.model == kind}


def run_window_sweep(cfg: ExperimentConfig, log: EventLog | None = None, test: bool = True,
                     access: DataAccess | None = None) -> SweepResult:
    """Fit each model on each training window ending at the last training day,
    early-stopping on validation mAP; then refit on the same-size window just
    before the test period for the selected number of epochs and score it there."""
    log = load_data(cfg) if log is None else log
    split = resolve_split(cfg, log)
    access = access or DataAccess(log, split)
    kinds = cfg.sweep.models or (cfg.run.model,)
    seed = cfg.run.seed
    valid_log = access.days(*split.valid, purpose="valid")
    available = split.train[1] - split.train[0] + 1
    pending = []
    for kind in kinds:
        p = cfg.params(kind)
        for w in cfg.sweep.windows:
            started = time.perf_counter()
            train_log = access.days(max(split.train[1] - w + 1, split.train[0]), split.train[1])
            res = train_model(kind, p, train_log, valid_log, seed)
            _log.info("%s w=%d valid mapSym=%.4f after %d epochs", kind, w, res.valid.map_sym,
                      res.best_epoch)
            pending.append(SweepRow(kind, w, res.valid, None, res.best_epoch, res.epochs_run,
                                    w > available, time.perf_counter() - started))
    result = SweepResult(pending, split)
    if not test:
        return result
    # refits use only pre-test days; test events are read only for scoring
    refits = []
    for row in pending:
        started = time.perf_counter()
        p = cfg.params(row.model)
        train_log = access.window(split.test[0] - 1, row.window_days, "refit")
        res = train_model(row.model, p, train_log, None, seed, epochs=row.epochs)
        refits.append((row, p, train_log, res.model))
        row.seconds += time.perf_counter() - started
    access.open_test()
    test_log = access.days(*split.test, purpose="test")
    for row, p, train_log, model in refits:
        row.test = score_period(model, p, train_log, test_log)
        result.models[(row.model, row.window_days)] = model
    return result


SWEEP_COLUMNS = ("model", "window_days", "valid_map_u", "valid_map_i", "valid_map_sym",
                 "test_map_u", "test_map_i", "test_map_sym", "epochs", "epochs_run", "truncated")


def sweep_rows(result: SweepResult):
    for r in result.rows:
        t = r.test
        yield (r.model, r.window_days, r.valid.map_user, r.valid.map_item, r.valid.map_sym,
               t.map_user if t else None, t.map_item if t else None, t.map_sym if t else None,
               r.epochs, r.epochs_run, int(r.truncated))


# sliding study ------------------------------------------------------------

@dataclass
class SlideRow:
    model: str
    mode: str
    window_days: int
    epochs: int
    test: MetricsReport


@dataclass
class SlideResult:
    rows: list[SlideRow]
    split: TemporalSplit
    windows: list[tuple[str, int, int, int]] = field(default_factory=list)

    def get(self, kind, mode) -> SlideRow:
        return next(r for r in self.rows if r.model == kind and r.mode == mode)


def slide_model(kind, p: ModelParams, log: EventLog, days, window: int, epochs: int, seed: int,
                warm_start=False, record=None) -> MetricsReport:
    """Retrain on the ``window`` days before each day and score that day only;
    all days' queries are pooled into one report."""
    reports, previous = [], None
    for tau in days:
        train_log = log.days(tau - window, tau - 1)
        if not train_log.is_empty and train_log.t[-1] >= tau:
            raise LeakageError(f"slide for day {tau} trains on day {train_log.t[-1]}")
        if record is not None:
            record.append((kind, int(tau), tau - window, tau - 1))
        day_log = log.days(tau, tau)
        if train_log.is_empty or day_log.is_empty:
            continue
        model = build_model(kind, p, train_log, seed)
        if warm_start and previous is not None:
            _warm_start(model, previous, train_log)
        res = fit(model, train_log, None, train_config(p, seed), epochs=epochs)
        previous = (res.model, train_log)
        reports.append(score_period(res.model, p, train_log, day_log))
    return MetricsReport.pooled(reports)


def _warm_start(model, previous, train_log):
    """Copy embedding rows of entities known to the previous day's model."""
    old, old_log = previous
    if not hasattr(model, "params") or type(old) is not type(model):
        return
    pairs = {"user_emb": "user_ids", "item_emb": "item_ids",
             "user_factors": "user_ids", "item_factors": "item_ids"}
    new_p, old_p = model.params(), old.params()
    for name, p in new_p.items():
        if name in pairs:
            ids_new, ids_old = getattr(train_log, pairs[name]), getattr(old_log, pairs[name])
            pos = np.searchsorted(ids_old, ids_new)
            pos = np.minimum(pos, len(ids_old) - 1)
            hit = ids_old[pos] == ids_new
            p[hit] = old_p[name][pos[hit]]
        else:
            p[...] = old_p[name]


def run_sliding_study(cfg: ExperimentConfig, log: EventLog | None = None,
                      selection: dict | None = None) -> SlideResult:
    """Sliding daily retrains against their static counterparts on the test period.

    ``selection`` maps a model kind to its ``(window, epochs)``; kinds
    missing from it take ``slide.window``/``slide.epochs`` when both are set
    and otherwise the best validation window of a validation-only sweep.
    Static rows follow the sweep's test protocol at the same window and
    epochs.  HCF is not slid unless ``slide.slide_hcf``.
    """
    log = load_data(cfg) if log is None else log
    split = resolve_split(cfg, log)
    seed = cfg.run.seed
    selection = dict(selection or {})
    missing = [k for k in cfg.slide.models if k not in selection]
    if missing and cfg.slide.window is not None and cfg.slide.epochs is not None:
        for k in missing:
            selection[k] = (cfg.slide.window, cfg.slide.epochs)
    elif missing:
        sweep_cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep,
                                                                       models=tuple(missing)))
        swept = run_window_sweep(sweep_cfg, log, test=False)
        for k in missing:
            best = swept.best(k)
            selection[k] = (best.window_days, best.epochs)
    result = SlideResult([], split)
    test_days = range(split.test[0], split.test[1] + 1)
    test_log = log.days(*split.test)
    for kind in cfg.slide.models:
        p = cfg.params(kind)
        window, epochs = selection[kind]
        if kind == "historical":
            epochs = 1
        train_log = log.days(split.test[0] - window, split.test[0] - 1)
        static = train_model(kind, p, train_log, None, seed, epochs=epochs).model
        result.rows.append(SlideRow(kind, "static", window, epochs,
                                    score_period(static, p, train_log, test_log)))
        if kind == "hcf" and not cfg.slide.slide_hcf:
            continue
        report = slide_model(kind, p, log, test_days, window, epochs, seed,
                             cfg.slide.warm_start, result.windows)
        result.rows.append(SlideRow(kind, "sliding", window, epochs, report))
    return result


SLIDE_COLUMNS = ("model", "mode", "window_days", "epochs", "test_map_u", "test_map_i",
                 "test_map_sym")


def slide_rows(result: SlideResult):
    for r in result.rows:
        yield (r.model, r.mode, r.window_days, r.epochs, r.test.map_user, r.test.map_item,
               r.test.map_sym)


# random search ------------------------------------------------------------

def parse_space(text: str) -> dict:
    """``name=kind:low:high`` entries separated by ``;``; kind is one of
    ``log`` (log-uniform float), ``float``, ``int``."""
    space = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        try:
            name, rest = part.split("=")
            kind, lo, hi = rest.split(":")
            lo, hi = float(lo), float(hi)
        except ValueError:
            raise ConfigError(f"bad search space entry {part!r}")
        if name not in {f.name for f in dataclasses.fields(ModelParams)}:
            raise ConfigError(f"search space names unknown hyperparameter {name!r}")
        if kind not in ("log", "float", "int") or lo > hi or (kind == "log" and lo <= 0):
            raise ConfigError(f"bad search range {part!r}")
        space[name] = (kind, lo, hi)
    return space


def sample_params(space, rng):
    out = {}
    for name, (kind, lo, hi) in space.items():
        if kind == "log":
            out[name] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        elif kind == "int":
            out[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            out[name] = float(rng.uniform(lo, hi))
    return out


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list[dict]


def run_random_search(cfg: ExperimentConfig, trials: int | None = None,
                      log: EventLog | None = None) -> SearchResult:
    trials = cfg.search.trials if trials is None else trials
    if trials < 1:
        raise ConfigError("search needs at least one trial")
    log = load_data(cfg) if log is None else log
    split = resolve_split(cfg, log)
    kind = cfg.run.model
    space = parse_space(cfg.search.space)
    rng = np.random.default_rng(cfg.run.seed)
    train_log = slice_window(log, split.train[1], cfg.search.window)
    valid_log = log.days(*split.valid)
    base = cfg.params(kind)
    log_rows = []
    for k in range(trials):
        values = sample_params(space, rng)
        p = dataclasses.replace(base, **values)
        res = train_model(kind, p, train_log, valid_log, cfg.run.seed)
        log_rows.append({"trial": k, **values, "epochs": res.best_epoch,
                         "valid_map_sym": res.valid.map_sym})
    best = max(log_rows, key=lambda r: r["valid_map_sym"])
    params = {k: best[k] for k in space}
    return SearchResult(params, best["valid_map_sym"], log_rows)


# outputs ------------------------------------------------------------------

DAILY_COLUMNS = ("day", "map_u", "map_i", "map_sym", "ewma_map_sym")


def prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}")
    return out


def manifest(cfg: ExperimentConfig, log: EventLog, command: str) -> dict:
    return {"command": command, "seed": cfg.run.seed, "config": cfg.to_dict(),
            "input_sha256": data_fingerprint(cfg, log), "events": len(log),
            "users": log.n_users, "items": log.n_items, "day_range": list(log.day_range)}


def export(results, out_dir, cfg: ExperimentConfig, log: EventLog, command: str):
    """Write the delimited outputs of a study plus ``report.json`` and ``manifest.json``.

    Files are overwritten; everything written here is a deterministic
    function of inputs, configuration and seed.
    """
    out = prepare_out(out_dir)
    report = {"command": command, "config": cfg.to_dict()}
    if isinstance(results, SweepResult):
        io.write_rows(out / "sweep.csv", SWEEP_COLUMNS, sweep_rows(results))
        report["split"] = dataclasses.asdict(results.split)
        report["best"] = {}
        for kind in dict.fromkeys(r.model for r in results.rows):
            best = results.best(kind)
            report["best"][kind] = {"window_days": best.window_days, "epochs": best.epochs,
                                    "valid": best.valid.to_dict(),
                                    "test": best.test.to_dict() if best.test else None}
            if best.test is not None:
                rows = best.test.daily_rows()
                io.write_rows(out / f"daily-{kind}.csv", DAILY_COLUMNS, rows)
                if kind == cfg.run.model:
                    io.write_rows(out / "daily.csv", DAILY_COLUMNS, rows)
            model = results.models.get((kind, best.window_days))
            if model is not None:
                io.save_model(model, out / f"model-{kind}.bin",
                              {"window_days": best.window_days,
                               "train_days": [results.split.test[0] - best.window_days,
                                              results.split.test[0] - 1]})
    elif isinstance(results, SlideResult):
        io.write_rows(out / "slide.csv", SLIDE_COLUMNS, slide_rows(results))
        report["split"] = dataclasses.asdict(results.split)
        report["rows"] = [dict(zip(SLIDE_COLUMNS, row)) for row in slide_rows(results)]
        main = [r for r in results.rows if r.model == cfg.run.model]
        if main:
            io.write_rows(out / "daily.csv", DAILY_COLUMNS, main[-1].test.daily_rows())
    elif isinstance(results, SearchResult):
        keys = list(results.trials[0]) if results.trials else []
        io.write_rows(out / "search.csv", keys, ([t[k] for k in keys] for t in results.trials))
        report["best"] = {"params": results.best, "valid_map_sym": results.best_score}
    elif isinstance(results, dict):
        report.update(results)
    io.write_json(out / "report.json", report)
    io.write_json(out / "manifest.json", manifest(cfg, log, command))
    return out


def write_timings(out_dir, results):
    """Wall-clock seconds per sweep row; kept apart from the deterministic outputs."""
    rows = [(r.model, r.window_days, round(r.seconds, 3)) for r in results.rows]
    io.write_rows(Path(out_dir) / "timings.csv", ("model", "window_days", "seconds"), rows)


def synth_to_csv(cfg: ExperimentConfig, path):
    write_csv(generate_synthetic(cfg.synth), path)
