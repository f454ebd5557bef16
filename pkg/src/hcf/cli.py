"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (flat ``section.key = value``
lines), ``--set section.key=value`` and one ``--section-key VALUE`` flag per
configuration field; later sources override earlier ones in that order.
Outputs go under ``--out DIR``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, io
from .errors import ConfigError, DataError, HcfError
from .events import write_csv
from .harness import ExperimentConfig
from .training import grad_check_suite

GRADCHECK_TOLERANCE = 1e-4


def _flag(key):
    return "--" + key.replace(".", "-").replace("_", "-")


def _common(out_default="out"):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat section.key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration field, e.g. hcf.lr=0.01")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("configuration fields")
    for key, _ in ExperimentConfig.fields():
        group.add_argument(_flag(key), dest=key, default=argparse.SUPPRESS, metavar="VALUE")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="hcf", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate a CSV event file")
    p.add_argument("csv", help="CSV with header date,user_id,item_id")
    sub.add_parser("synth", parents=[common], help="write a synthetic event log as CSV")
    sub.add_parser("train", parents=[common], help="fit one model with early stopping")
    p = sub.add_parser("eval", parents=[common], help="score a saved model")
    p.add_argument("model_file")
    p.add_argument("--period", choices=("valid", "test"), default="test")
    sub.add_parser("sweep", parents=[common], help="training window size study")
    sub.add_parser("slide", parents=[common], help="sliding daily retrain study")
    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("--trials", type=int)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-5)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = cfg.replace(key.strip(), value.strip())
    for key, _ in ExperimentConfig.fields():
        if key in vars(args):
            cfg = cfg.replace(key, getattr(args, key))
    return cfg


# subcommands --------------------------------------------------------------

def cmd_ingest(args, cfg):
    cfg = cfg.replace("data.csv", args.csv)
    log = harness.load_data(cfg)
    out = harness.prepare_out(args.out)
    write_csv(log, out / "events.csv")
    summary = {"events": len(log), "users": log.n_users, "items": log.n_items,
               "day_range": list(log.day_range), "origin": str(log.origin)}
    harness.export(summary, out, cfg, log, "ingest")
    print(f"{len(log)} events, {log.n_users} users, {log.n_items} items")


def cmd_synth(args, cfg):
    log = harness.load_data(cfg.replace("data.csv", None))
    out = harness.prepare_out(args.out)
    write_csv(log, out / "events.csv")
    print(f"wrote {len(log)} events to {out / 'events.csv'}")


def _train_window(cfg, split):
    start, end = split.train
    if cfg.train.window is not None:
        start = max(start, end - cfg.train.window + 1)
    return start, end


def cmd_train(args, cfg):
    log = harness.load_data(cfg)
    split = harness.resolve_split(cfg, log)
    out = harness.prepare_out(args.out)
    kind, p = cfg.run.model, cfg.params(cfg.run.model)
    start, end = _train_window(cfg, split)
    train_log, valid_log = log.days(start, end), log.days(*split.valid)
    res = harness.train_model(kind, p, train_log, valid_log, cfg.run.seed,
                              trace_path=out / "trace.csv")
    io.save_model(res.model, out / f"model-{kind}.bin",
                  {"train_days": [start, end], "epochs": res.best_epoch})
    summary = {"model": kind, "train_days": [start, end], "epochs": res.best_epoch,
               "epochs_run": res.epochs_run, "valid": res.valid.to_dict() if res.valid else None}
    harness.export(summary, out, cfg, log, "train")
    if res.valid is not None:
        print(f"{kind}: valid mapSym {res.valid.map_sym:.4f} at epoch {res.best_epoch}")


def cmd_eval(args, cfg):
    model, header = io.load_model(args.model_file)
    log = harness.load_data(cfg)
    split = harness.resolve_split(cfg, log)
    train_days = header["config"].get("train_days")
    if train_days is None:
        raise ConfigError(f"{args.model_file} does not record its training window")
    train_log = log.days(*train_days)
    if (train_log.n_users, train_log.n_items) != (model.n_users, model.n_items):
        raise DataError("model vocabulary does not match its training window in this data")
    period = split.valid if args.period == "valid" else split.test
    n = header["config"].get("n", cfg.hcf.n)
    p = cfg.params(header["kind"]).__class__(n=n)
    report = harness.score_period(model, p, train_log, log.days(*period))
    out = harness.prepare_out(args.out)
    io.write_rows(out / "daily.csv", harness.DAILY_COLUMNS, report.daily_rows())
    harness.export({"model": header["kind"], "period": args.period,
                    "days": list(period), "metrics": report.to_dict()}, out, cfg, log, "eval")
    print(f"{args.period} mapU {report.map_user:.4f} mapI {report.map_item:.4f} "
          f"mapSym {report.map_sym:.4f}")


def cmd_sweep(args, cfg):
    log = harness.load_data(cfg)
    result = harness.run_window_sweep(cfg, log)
    harness.export(result, args.out, cfg, log, "sweep")
    for row in result.rows:
        flag = " (window exceeds history)" if row.truncated else ""
        print(f"{row.model:12s} {row.window_days:4d}d valid {row.valid_map_sym:.4f} "
              f"test {row.test_map_sym:.4f}{flag}")


def cmd_slide(args, cfg):
    log = harness.load_data(cfg)
    result = harness.run_sliding_study(cfg, log)
    harness.export(result, args.out, cfg, log, "slide")
    for row in result.rows:
        print(f"{row.model:12s} {row.mode:8s} {row.window_days:4d}d test {row.test.map_sym:.4f}")


def cmd_search(args, cfg):
    log = harness.load_data(cfg)
    result = harness.run_random_search(cfg, args.trials, log)
    harness.export(result, args.out, cfg, log, "search")
    print(f"best valid mapSym {result.best_score:.4f} with {result.best}")


def cmd_gradcheck(args, cfg):
    worst = grad_check_suite(args.seeds, args.epsilon)
    out = harness.prepare_out(args.out)
    summary = {kind: {"max_error": rep.max_error, "checked": rep.checked,
                      "skipped_nondifferentiable": rep.skipped_nondifferentiable}
               for kind, rep in worst.items()}
    io.write_json(out / "report.json", {"command": "gradcheck", "seeds": args.seeds,
                                        "epsilon": args.epsilon, "models": summary})
    ok = True
    for kind, rep in worst.items():
        passed = rep.max_error < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{kind:12s} max relative error {rep.max_error:.3e} "
              f"({rep.checked} coordinates) {'ok' if passed else 'FAIL'}")
    return 0 if ok else 3


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "slide": cmd_slide, "search": cmd_search,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg) or 0
    except HcfError as exc:
        print(f"hcf {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"hcf {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
