"""Command-line entry point: ``homewatch <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from datetime import datetime, time, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from homewatch import analytics, forest, lstm, pipeline, synth
from homewatch.config import ConfigError, load_config
from homewatch.events import ParseError, load_dataset
from homewatch.features import NoSegments, StreamTooShort, compute_mi_matrix
from homewatch.metrics import EvalReport, LengthMismatch
from homewatch.replay import FORECAST_RISK, Alert, run_replay

logger = logging.getLogger("homewatch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_report(out: Path, prefix: str, report: EvalReport, roc_class: Optional[str] = None) -> None:
    _write(out / f"{prefix}_report.json", report.to_json() + "\n")
    _write(out / f"{prefix}_report.txt", report.table() + "\n")
    if roc_class is not None:
        if roc_class in report.roc:
            _write(out / f"{prefix}_roc.csv", report.roc_text(roc_class))
    else:
        for cls, _ in sorted(report.roc.items()):
            _write(out / f"{prefix}_roc" / f"{cls}.csv", report.roc_text(cls))


def _dataset(path: str, strict: bool = False):
    ds = load_dataset(path, strict=strict)
    if ds.report.malformed:
        logger.warning("%d malformed lines skipped", ds.report.malformed)
    return ds


def cmd_synth(args) -> int:
    doc = copy.deepcopy(synth.DEFAULT_SCENARIO)
    if args.scenario:
        with open(args.scenario, encoding="utf-8") as fh:
            doc = json.load(fh)
    if args.days is not None:
        doc["days"] = args.days
    events = synth.generate(synth.scenario_from_dict(doc), args.seed)
    if args.output == "-":
        for e in events:
            sys.stdout.write(e.to_line() + "\n")
    else:
        synth.write_log(events, args.output)
    logger.info("wrote %d events", len(events))
    return EXIT_OK


def cmd_parse(args) -> int:
    ds = _dataset(args.log, args.strict)
    doc = ds.report.as_dict()
    doc["sensors"] = len(ds.sensor_registry)
    doc["activities"] = sorted({s.activity for s in ds.segments})
    print(json.dumps(doc, sort_keys=True))
    for err in ds.report.errors:
        logger.warning(err)
    return EXIT_OK


def cmd_mi(args) -> int:
    ds = _dataset(args.log)
    mi = compute_mi_matrix(ds, args.grouping)
    text = mi.to_text()
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _training_config(args):
    cfg = load_config(args.config)
    if args.chronological:
        cfg.split.chronological = True
    if args.stratify:
        cfg.split.stratify = True
    return cfg


def cmd_train_activity(args) -> int:
    cfg = _training_config(args)
    ds = _dataset(args.log)
    result = pipeline.train_activity(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_activity_model(result.model, out / "activity_model.json")
    _write(out / "mi.csv", result.model.mi.to_text())
    _write(out / "activity_importance.csv", forest.importance_table(result.model.forest))
    _write_report(out, "activity", result.report)
    print(result.report.table())
    return EXIT_OK


def cmd_train_anomaly(args) -> int:
    cfg = _training_config(args)
    model = pipeline.load_activity_model(args.activity_model)
    ds = _dataset(args.log)
    instances = pipeline.infer_instances(model, ds.events, cfg)
    rules = analytics.load_rules(args.rules) if args.rules else None
    records, resolved = pipeline.anomaly_dataset(instances, cfg, rules)
    out = Path(args.out)
    _write(out / "anomaly_dataset.csv", analytics.records_to_csv(records))
    _write(out / "rules_resolved.json", json.dumps(analytics.rules_to_dict(resolved), indent=2, sort_keys=True) + "\n")
    result = pipeline.train_anomaly(records, cfg)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_anomaly_model(result.model, out / "anomaly_model.json")
    _write(out / "anomaly_importance.csv", forest.importance_table(result.model.forest))
    _write_report(out, "anomaly", result.report, roc_class=analytics.ABNORMAL)
    print(result.report.table())
    return EXIT_OK


def _instances_for(args, cfg):
    if args.dataset:
        with open(args.dataset, encoding="utf-8") as fh:
            return analytics.records_from_csv(fh.read())
    if not (args.log and args.activity_model):
        raise UsageError("give --dataset, or a log together with --activity-model")
    model = pipeline.load_activity_model(args.activity_model)
    return pipeline.infer_instances(model, _dataset(args.log).events, cfg)


def cmd_train_forecast(args) -> int:
    cfg = load_config(args.config)
    instances = _instances_for(args, cfg)
    model, days, values = pipeline.train_forecaster(instances, args.activity, args.metric, cfg)
    lstm.save_model(model, args.out)
    print(json.dumps({"days": len(days), **{k: float(v) for k, v in model.history.items()}}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if bool(args.activity_model) == bool(args.anomaly_model):
        raise UsageError("give exactly one of --activity-model or --anomaly-model")
    if args.activity_model:
        if not args.log:
            raise UsageError("--activity-model needs a log file")
        report = pipeline.evaluate_activity(pipeline.load_activity_model(args.activity_model), _dataset(args.log))
        prefix, roc_class = "activity_eval", None
    else:
        if not args.dataset:
            raise UsageError("--anomaly-model needs --dataset")
        with open(args.dataset, encoding="utf-8") as fh:
            records = analytics.records_from_csv(fh.read())
        report = pipeline.evaluate_anomaly(pipeline.load_anomaly_model(args.anomaly_model), records)
        prefix, roc_class = "anomaly_eval", analytics.ABNORMAL
    if args.out:
        _write_report(Path(args.out), prefix, report, roc_class)
    print(report.table())
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = load_config(args.config)
    model = lstm.load_model(args.model)
    if args.values:
        values = np.array([float(v) for v in args.values.split(",")])
        days = None
    else:
        if not args.activity:
            raise UsageError("--activity is required unless --values is given")
        days, values = lstm.daily_series(_instances_for(args, cfg), args.activity, args.metric)
    L = model.config.lookback
    if len(values) < L:
        raise StreamTooShort(f"need {L} daily values, have {len(values)}")
    result = lstm.forecast(model, values[-L:], args.z_threshold)
    lines = ["day,predicted,flag"]
    for k, (v, flag) in enumerate(zip(result.values, result.flags)):
        label = (days[-1] + timedelta(days=k + 1)).isoformat() if days else f"+{k + 1}"
        lines.append(f"{label},{v:.6f},{int(flag)}")
        if flag and args.alerts:
            alert = Alert(
                emitted_at=datetime.combine(days[-1], time(23, 59, 59)) if days else datetime(1970, 1, 1),
                kind=FORECAST_RISK,
                activity=args.activity or "",
                detail={"day": label, "predicted": round(float(v), 6), "reference_mean": round(model.reference[0], 6),
                        "reference_std": round(model.reference[1], 6)},
                vote_share=1.0,
            )
            sys.stderr.write(alert.to_line() + "\n")
    text = "\n".join(lines) + "\n"
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = load_config(args.config)
    if not args.activity_model or not args.anomaly_model:
        raise pipeline.ModelMissing("replay needs --activity-model and --anomaly-model")
    am = pipeline.load_activity_model(args.activity_model)
    an = pipeline.load_anomaly_model(args.anomaly_model)
    ds = _dataset(args.log)
    if len(ds.events) < am.window_size:
        raise StreamTooShort(f"{len(ds.events)} events < window size {am.window_size}")
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            run_replay(ds.events, am, an, fh, args.speed, cfg.min_run, cfg.max_gap)
    else:
        run_replay(ds.events, am, an, sys.stdout, args.speed, cfg.min_run, cfg.max_gap)
    return EXIT_OK


def _split_flags(s: argparse.ArgumentParser) -> None:
    s.add_argument("--chronological", action="store_true",
                   help="hold out the last 20%% in time order instead of a random 20%%")
    s.add_argument("--stratify", action="store_true", help="keep class proportions in the random split")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="homewatch", description="Smart-home activity monitoring pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labeled log")
    s.add_argument("--scenario", help="scenario JSON (default: built-in 6-activity scenario)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--days", type=int)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("parse", help="parse a log and print the parse report")
    s.add_argument("log")
    s.add_argument("--strict", action="store_true")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("mi", help="export the sensor co-activation matrix")
    s.add_argument("log")
    s.add_argument("--grouping", choices=["instance", "activity"], default="instance")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_mi)

    s = sub.add_parser("train-activity", help="train and evaluate the activity forest")
    s.add_argument("log")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    _split_flags(s)
    s.set_defaults(func=cmd_train_activity)

    s = sub.add_parser("train-anomaly", help="label instances and train the anomaly forest")
    s.add_argument("log")
    s.add_argument("--activity-model", required=True)
    s.add_argument("--rules")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    _split_flags(s)
    s.set_defaults(func=cmd_train_anomaly)

    s = sub.add_parser("train-forecast", help="train an LSTM on one activity's daily series")
    s.add_argument("log", nargs="?")
    s.add_argument("--activity-model")
    s.add_argument("--dataset", help="anomaly_dataset.csv as the instance source")
    s.add_argument("--activity", required=True)
    s.add_argument("--metric", choices=["duration", "frequency"], default="duration")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_forecast)

    s = sub.add_parser("eval", help="evaluate a saved model")
    s.add_argument("log", nargs="?")
    s.add_argument("--activity-model")
    s.add_argument("--anomaly-model")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("forecast", help="forecast the next days of an activity metric")
    s.add_argument("log", nargs="?")
    s.add_argument("--model", required=True)
    s.add_argument("--activity-model")
    s.add_argument("--dataset")
    s.add_argument("--activity")
    s.add_argument("--metric", choices=["duration", "frequency"], default="duration")
    s.add_argument("--values", help="comma-separated raw daily values (last lookback used)")
    s.add_argument("--z-threshold", type=float, default=3.0)
    s.add_argument("--alerts", action="store_true", help="write forecast_risk alert lines to stderr")
    s.add_argument("--config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("replay", help="replay a log and stream alerts")
    s.add_argument("log")
    s.add_argument("--activity-model")
    s.add_argument("--anomaly-model")
    s.add_argument("--speed", type=float, default=0.0, help="time dilation factor; 0 = as fast as possible")
    s.add_argument("--config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"homewatch: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (forest.ModelFileError, lstm.ModelFileError, pipeline.ModelMissing, forest.SchemaMismatch) as exc:
        print(f"homewatch: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ParseError, NoSegments, StreamTooShort, synth.BadScenario, analytics.SingleClassTrainingSet,
            lstm.SeriesTooShort, LengthMismatch, FileNotFoundError, ValueError) as exc:
        print(f"homewatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
