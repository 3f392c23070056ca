"""End-to-end steps shared by the CLI, the replay loop and the acceptance tests."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from homewatch import analytics, forest, lstm
from homewatch.config import PipelineConfig
from homewatch.events import EventDataset, SensorEvent, label_events
from homewatch.features import MIMatrix, compute_mi_matrix, feature_schema, vectorize_stream
from homewatch.metrics import EvalReport, evaluate, split_train_test

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "homewatch-activity"
ANOMALY_FORMAT = "homewatch-anomaly"
BUNDLE_VERSION = 1


class ModelMissing(RuntimeError):
    pass


@dataclass
class ActivityClassifier:
    """Window size, MI weighting matrix and the forest that labels each window's last event."""

    window_size: int
    mi: MIMatrix
    forest: forest.RandomForestModel

    def features(self, events: Sequence[SensorEvent]) -> np.ndarray:
        return vectorize_stream(events, self.mi, self.window_size)

    def predict_stream(self, events: Sequence[SensorEvent]) -> tuple[list[str], np.ndarray]:
        """Labels and vote shares for events ``window_size - 1`` onwards."""
        shares = self.forest.vote_shares(self.features(events))
        labels = [self.forest.classes[k] for k in np.argmax(shares, axis=1)]
        return labels, shares

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "window_size": self.window_size,
            "mi": self.mi.to_dict(),
            "forest": forest.model_to_dict(self.forest),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ActivityClassifier":
        if doc.get("format") != BUNDLE_FORMAT:
            raise forest.CorruptModel("not an activity model bundle")
        if doc.get("version") != BUNDLE_VERSION:
            raise forest.VersionMismatch(f"activity bundle version {doc.get('version')!r}")
        try:
            return cls(int(doc["window_size"]), MIMatrix.from_dict(doc["mi"]), forest.model_from_dict(doc["forest"]))
        except (KeyError, TypeError) as exc:
            raise forest.CorruptModel(f"malformed activity bundle: {exc}") from exc


def _dump(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ModelMissing(f"model file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise forest.CorruptModel(f"{path}: invalid JSON ({exc})") from exc


def save_activity_model(model: ActivityClassifier, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(model.to_dict()))


def load_activity_model(path) -> ActivityClassifier:
    return ActivityClassifier.from_dict(_load_json(path))


def save_anomaly_model(model: analytics.AnomalyModel, path) -> None:
    doc = {"format": ANOMALY_FORMAT, "version": BUNDLE_VERSION, **model.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump(doc))


def load_anomaly_model(path) -> analytics.AnomalyModel:
    doc = _load_json(path)
    if doc.get("format") != ANOMALY_FORMAT:
        raise forest.CorruptModel("not an anomaly model bundle")
    if doc.get("version") != BUNDLE_VERSION:
        raise forest.VersionMismatch(f"anomaly bundle version {doc.get('version')!r}")
    try:
        return analytics.AnomalyModel.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise forest.CorruptModel(f"malformed anomaly bundle: {exc}") from exc


def _split(cfg: PipelineConfig, labels: Sequence[str]):
    return split_train_test(
        len(labels),
        cfg.split.ratio,
        cfg.seed,
        stratify=labels if cfg.split.stratify else None,
        chronological=cfg.split.chronological,
    )


@dataclass
class ActivityTraining:
    model: ActivityClassifier
    report: EvalReport
    train_idx: np.ndarray
    test_idx: np.ndarray


def train_activity(ds: EventDataset, cfg: PipelineConfig) -> ActivityTraining:
    """MI matrix, window features, 8:2 split, forest fit and held-out evaluation."""
    mi = compute_mi_matrix(ds, cfg.mi_grouping)
    X = vectorize_stream(ds.events, mi, cfg.window_size)
    y = label_events(ds)[cfg.window_size - 1 :]
    tr, te = _split(cfg, y)
    schema = feature_schema(mi.sensors)
    rf = forest.fit_forest(X[tr], [y[i] for i in tr], cfg.activity_forest, schema)
    model = ActivityClassifier(cfg.window_size, mi, rf)
    shares = rf.vote_shares(X[te])
    report = _report(rf, [y[i] for i in te], shares)
    return ActivityTraining(model, report, tr, te)


def _report(rf: forest.RandomForestModel, truth: Sequence[str], shares: np.ndarray, pos_label=None) -> EvalReport:
    classes = sorted(set(rf.classes) | set(truth))
    full = np.zeros((len(truth), len(classes)))
    col = {c: i for i, c in enumerate(classes)}
    for k, c in enumerate(rf.classes):
        full[:, col[c]] = shares[:, k]
    pred = [rf.classes[k] for k in np.argmax(shares, axis=1)]
    return evaluate(truth, pred, full, classes, pos_label=pos_label)


def evaluate_activity(model: ActivityClassifier, ds: EventDataset) -> EvalReport:
    labels, shares = model.predict_stream(ds.events)
    truth = label_events(ds)[model.window_size - 1 :]
    return _report(model.forest, truth, shares)


def infer_instances(model: ActivityClassifier, events: Sequence[SensorEvent], cfg: PipelineConfig) -> list[analytics.ActivityInstance]:
    """Activity instances from the classifier's per-event predictions over a whole stream."""
    labels, _ = model.predict_stream(events)
    offset = model.window_size - 1
    stamps = [e.timestamp for e in events[offset:]]
    inst = analytics.aggregate_instances(labels, stamps, cfg.min_run, cfg.max_gap)
    return [
        analytics.ActivityInstance(i.activity, i.start, i.end, i.sequence_index, i.first_event + offset, i.last_event + offset)
        for i in inst
    ]


def resolve_rules(stats: analytics.DailyStats, cfg: PipelineConfig, rules: Optional[analytics.AnomalyRules] = None) -> analytics.AnomalyRules:
    """Percentile time windows for every activity, overridden by user rules where given."""
    lo, hi = cfg.rule_percentiles
    base = analytics.AnomalyRules(3.0, analytics.default_time_ranges(stats, lo, hi))
    if rules is None and cfg.rules:
        rules = analytics.load_rules(cfg.rules)
    return base.merged(rules) if rules is not None else base


def anomaly_dataset(instances, cfg: PipelineConfig, rules: Optional[analytics.AnomalyRules] = None):
    stats = analytics.daily_stats(instances)
    resolved = resolve_rules(stats, cfg, rules)
    return analytics.label_anomalies(stats, resolved), resolved


@dataclass
class AnomalyTraining:
    model: analytics.AnomalyModel
    report: EvalReport
    train_idx: np.ndarray
    test_idx: np.ndarray


def train_anomaly(records: Sequence[analytics.AnomalyRecord], cfg: PipelineConfig) -> AnomalyTraining:
    labels = [r.label for r in records]
    tr, te = _split(cfg, labels)
    model = analytics.train_anomaly_model([records[i] for i in tr], cfg.anomaly_forest)
    test = [records[i] for i in te]
    shares = model.forest.vote_shares(model.matrix(test))
    report = _report(model.forest, [r.label for r in test], shares, pos_label=analytics.ABNORMAL)
    return AnomalyTraining(model, report, tr, te)


def evaluate_anomaly(model: analytics.AnomalyModel, records: Sequence[analytics.AnomalyRecord]) -> EvalReport:
    shares = model.forest.vote_shares(model.matrix(records))
    return _report(model.forest, [r.label for r in records], shares, pos_label=analytics.ABNORMAL)


def train_forecaster(instances, activity: str, metric: str, cfg: PipelineConfig) -> tuple[lstm.ForecastModel, list, np.ndarray]:
    days, values = lstm.daily_series(instances, activity, metric)
    return lstm.train(values, cfg.lstm), days, values
