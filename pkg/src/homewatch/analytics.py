"""Activity instances, daily statistics, rule-based anomaly labeling and the anomaly forest."""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from homewatch.events import OTHER_ACTIVITY
from homewatch.features import CATEGORICAL, NUMERIC, FeatureSchema, seconds_since_midnight
from homewatch.forest import ForestConfig, RandomForestModel, fit_forest, model_from_dict, model_to_dict

logger = logging.getLogger(__name__)

DAY_SECONDS = 86400.0
# below timestamp resolution; absorbs round-off from mapping windows around the circle
_WINDOW_TOL = 1e-7
NORMAL = "normal"
ABNORMAL = "abnormal"
REASONS = ("freq_z", "span_z", "start_range", "end_range")

ANOMALY_SCHEMA = FeatureSchema(
    ("activity_type", "start_s", "end_s", "duration_s", "sequence_index"),
    (CATEGORICAL, NUMERIC, NUMERIC, NUMERIC, NUMERIC),
)


class SingleClassTrainingSet(ValueError):
    pass


@dataclass(frozen=True)
class ActivityInstance:
    activity: str
    start: datetime
    end: datetime
    sequence_index: int = 0
    first_event: int = -1
    last_event: int = -1

    @property
    def duration_s(self) -> float:
        return (self.end - self.start).total_seconds()

    @property
    def day(self) -> date:
        return self.start.date()

    @property
    def start_s(self) -> float:
        return seconds_since_midnight(self.start)

    @property
    def end_s(self) -> float:
        return seconds_since_midnight(self.end)


class InstanceTracker:
    """Streaming run-length grouping of per-event labels into activity instances.

    A run of label L stays open while the events after its last L form a gap of
    at most ``max_gap`` events containing no run of another activity at least
    ``min_run`` long; an L after such a gap absorbs it. Closed instances shorter
    than ``min_run`` events are dropped, as are ``Other_Activity`` runs.
    """

    def __init__(self, min_run: int = 2, max_gap: int | None = None):
        if min_run < 1:
            raise ValueError("min_run must be >= 1")
        self.min_run = min_run
        self.max_gap = min_run if max_gap is None else max_gap
        self._cur: Optional[list] = None  # [label, first_idx, start_t, last_idx, end_t]
        self._gap: list[tuple[int, str, datetime]] = []
        self._per_day: Counter = Counter()

    def _emit(self) -> list[ActivityInstance]:
        label, first, start, last, end = self._cur
        self._cur = None
        if last - first + 1 < self.min_run:
            return []
        seq = self._per_day[start.date()]
        self._per_day[start.date()] += 1
        return [ActivityInstance(label, start, end, seq, first, last)]

    def _gap_has_strong_run(self) -> bool:
        label = self._gap[-1][1]
        if label == OTHER_ACTIVITY:
            return False
        run = 0
        for _, lab, _ in reversed(self._gap):
            if lab != label:
                break
            run += 1
        return run >= self.min_run

    def feed(self, index: int, label: str, timestamp: datetime) -> list[ActivityInstance]:
        if self._cur is None:
            if label != OTHER_ACTIVITY:
                self._cur = [label, index, timestamp, index, timestamp]
            return []
        if label == self._cur[0]:
            self._gap.clear()
            self._cur[3], self._cur[4] = index, timestamp
            return []
        self._gap.append((index, label, timestamp))
        if len(self._gap) <= self.max_gap and not self._gap_has_strong_run():
            return []
        closed = self._emit()
        pending, self._gap = self._gap, []
        for item in pending:
            closed.extend(self.feed(*item))
        return closed

    def flush(self) -> list[ActivityInstance]:
        closed = self._emit() if self._cur is not None else []
        pending, self._gap = self._gap, []
        for item in pending:
            closed.extend(self.feed(*item))
        if self._cur is not None:
            closed.extend(self.flush())
        return closed


def aggregate_instances(
    labels: Sequence[str], timestamps: Sequence[datetime], min_run: int = 2, max_gap: int | None = None
) -> list[ActivityInstance]:
    if len(labels) != len(timestamps):
        raise ValueError("labels and timestamps differ in length")
    tracker = InstanceTracker(min_run, max_gap)
    out: list[ActivityInstance] = []
    for i, (lab, ts) in enumerate(zip(labels, timestamps)):
        out.extend(tracker.feed(i, lab, ts))
    out.extend(tracker.flush())
    return out


def zscore(value: float, mean: float, std: float) -> float:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return 0.0
    return (value - mean) / std


@dataclass
class DailyStats:
    instances: list[ActivityInstance]
    days: list[date]
    frequency: dict[tuple[date, str], int]

    @property
    def activities(self) -> list[str]:
        return sorted({i.activity for i in self.instances})

    def frequency_series(self, activity: str) -> np.ndarray:
        return np.array([self.frequency.get((d, activity), 0) for d in self.days], dtype=float)

    def days_with(self, activity: str) -> int:
        return sum(1 for d in self.days if self.frequency.get((d, activity), 0) > 0)


def daily_stats(instances: Iterable[ActivityInstance]) -> DailyStats:
    """Per-day, per-activity frequencies over the continuous calendar range of the instances."""
    instances = sorted(instances, key=lambda i: (i.start, i.activity))
    if not instances:
        return DailyStats([], [], {})
    first, last = instances[0].day, max(i.day for i in instances)
    days = [first + timedelta(days=k) for k in range((last - first).days + 1)]
    freq = Counter((i.day, i.activity) for i in instances)
    return DailyStats(instances, days, dict(freq))


@dataclass(frozen=True)
class TimeWindow:
    """Allowed interval of seconds-since-midnight; ``lo > hi`` wraps past midnight."""

    lo: float
    hi: float

    def __post_init__(self):
        for v in (self.lo, self.hi):
            if not 0 <= v < DAY_SECONDS:
                raise ValueError(f"time {v} outside [0, 86400)")

    def contains(self, t: float) -> bool:
        lo, hi = self.lo - _WINDOW_TOL, self.hi + _WINDOW_TOL
        if self.lo <= self.hi:
            return lo <= t <= hi
        return t >= lo or t <= hi

    @property
    def length(self) -> float:
        return self.hi - self.lo if self.lo <= self.hi else DAY_SECONDS - self.lo + self.hi


@dataclass(frozen=True)
class ActivityRule:
    start_window: Optional[TimeWindow] = None
    end_window: Optional[TimeWindow] = None
    z_threshold: Optional[float] = None


@dataclass
class AnomalyRules:
    z_threshold: float = 3.0
    activities: dict[str, ActivityRule] = field(default_factory=dict)

    def __post_init__(self):
        if self.z_threshold <= 0:
            raise ValueError("z_threshold must be positive")

    def threshold_for(self, activity: str) -> float:
        rule = self.activities.get(activity)
        if rule is not None and rule.z_threshold is not None:
            return rule.z_threshold
        return self.z_threshold

    def merged(self, overrides: "AnomalyRules") -> "AnomalyRules":
        """These rules with per-activity entries from ``overrides`` taking precedence field by field."""
        acts = dict(self.activities)
        for name, rule in overrides.activities.items():
            base = acts.get(name, ActivityRule())
            acts[name] = ActivityRule(
                rule.start_window or base.start_window,
                rule.end_window or base.end_window,
                rule.z_threshold if rule.z_threshold is not None else base.z_threshold,
            )
        return AnomalyRules(overrides.z_threshold, acts)


def parse_clock(value) -> float:
    """Seconds since midnight from a number or an ``HH:MM[:SS]`` string."""
    if isinstance(value, (int, float)):
        return float(value)
    parts = [float(p) for p in str(value).split(":")]
    if not 2 <= len(parts) <= 3:
        raise ValueError(f"bad clock time {value!r}")
    parts += [0.0] * (3 - len(parts))
    return parts[0] * 3600 + parts[1] * 60 + parts[2]


def format_clock(seconds: float) -> str:
    s = int(round(seconds)) % int(DAY_SECONDS)
    return f"{s // 3600:02d}:{s % 3600 // 60:02d}:{s % 60:02d}"


def rules_from_dict(doc: Mapping) -> AnomalyRules:
    unknown = set(doc) - {"z_threshold", "activities"}
    if unknown:
        raise ValueError(f"unknown rules keys: {sorted(unknown)}")
    acts = {}
    for name, spec in (doc.get("activities") or {}).items():
        bad = set(spec) - {"start_window", "end_window", "z_threshold"}
        if bad:
            raise ValueError(f"unknown keys for activity {name}: {sorted(bad)}")
        windows = {}
        for key in ("start_window", "end_window"):
            if spec.get(key) is not None:
                lo, hi = spec[key]
                windows[key] = TimeWindow(parse_clock(lo), parse_clock(hi))
        acts[name] = ActivityRule(windows.get("start_window"), windows.get("end_window"), spec.get("z_threshold"))
    return AnomalyRules(float(doc.get("z_threshold", 3.0)), acts)


def rules_to_dict(rules: AnomalyRules) -> dict:
    acts = {}
    for name in sorted(rules.activities):
        rule = rules.activities[name]
        entry: dict = {}
        if rule.start_window is not None:
            entry["start_window"] = [format_clock(rule.start_window.lo), format_clock(rule.start_window.hi)]
        if rule.end_window is not None:
            entry["end_window"] = [format_clock(rule.end_window.lo), format_clock(rule.end_window.hi)]
        if rule.z_threshold is not None:
            entry["z_threshold"] = rule.z_threshold
        acts[name] = entry
    return {"z_threshold": rules.z_threshold, "activities": acts}


def load_rules(path) -> AnomalyRules:
    with open(path, encoding="utf-8") as fh:
        return rules_from_dict(json.load(fh))


def circular_percentile_window(values: Sequence[float], lo_pct: float = 1.0, hi_pct: float = 99.0) -> TimeWindow:
    """Percentile interval of day-second values measured on the 24h circle.

    The circle is cut at the widest empty arc between observations, so a cluster
    around midnight yields a wrapping window.
    """
    v = np.sort(np.mod(np.asarray(values, dtype=float), DAY_SECONDS))
    if len(v) == 0:
        raise ValueError("no observations")
    gaps = np.diff(np.r_[v, v[0] + DAY_SECONDS])
    cut = v[(int(np.argmax(gaps)) + 1) % len(v)]
    shifted = np.mod(v - cut, DAY_SECONDS)
    lo, hi = np.percentile(shifted, [lo_pct, hi_pct])
    return TimeWindow(float(np.mod(lo + cut, DAY_SECONDS)), float(np.mod(hi + cut, DAY_SECONDS)))


def default_time_ranges(stats: DailyStats, lo_pct: float = 1.0, hi_pct: float = 99.0) -> dict[str, ActivityRule]:
    out = {}
    for act in stats.activities:
        inst = [i for i in stats.instances if i.activity == act]
        out[act] = ActivityRule(
            circular_percentile_window([i.start_s for i in inst], lo_pct, hi_pct),
            circular_percentile_window([i.end_s for i in inst], lo_pct, hi_pct),
        )
    return out


@dataclass(frozen=True)
class AnomalyRecord:
    activity: str
    day: date
    start_s: float
    end_s: float
    duration_s: float
    sequence_index: int
    label: str = NORMAL
    reasons: frozenset = frozenset()

    @classmethod
    def from_instance(cls, inst: ActivityInstance, label: str = NORMAL, reasons=frozenset()) -> "AnomalyRecord":
        return cls(inst.activity, inst.day, inst.start_s, inst.end_s, inst.duration_s, inst.sequence_index, label, frozenset(reasons))

    def features(self, activity_codes: Mapping[str, int]) -> list[float]:
        return [
            float(activity_codes.get(self.activity, -1)),
            self.start_s,
            self.end_s,
            self.duration_s,
            float(self.sequence_index),
        ]


def label_anomalies(stats: DailyStats, rules: AnomalyRules | None = None) -> list[AnomalyRecord]:
    """Rule labels: |z| of duration or of the day's frequency above threshold, or start/end outside the allowed window."""
    rules = rules or AnomalyRules()
    by_act: dict[str, list[ActivityInstance]] = {}
    for inst in stats.instances:
        by_act.setdefault(inst.activity, []).append(inst)

    moments = {}
    for act, inst in by_act.items():
        if stats.days_with(act) < 2:
            logger.warning("activity %s observed on fewer than 2 days; z-score rules skipped", act)
            continue
        freq = stats.frequency_series(act)
        dur = np.array([i.duration_s for i in inst])
        moments[act] = (freq.mean(), freq.std(), dur.mean(), dur.std())

    records = []
    for inst in stats.instances:
        act = inst.activity
        reasons = set()
        thr = rules.threshold_for(act)
        if act in moments:
            fm, fs, dm, ds = moments[act]
            if abs(zscore(inst.duration_s, dm, ds)) > thr:
                reasons.add("span_z")
            if abs(zscore(stats.frequency.get((inst.day, act), 0), fm, fs)) > thr:
                reasons.add("freq_z")
        rule = rules.activities.get(act)
        if rule is not None:
            if rule.start_window is not None and not rule.start_window.contains(inst.start_s):
                reasons.add("start_range")
            if rule.end_window is not None and not rule.end_window.contains(inst.end_s):
                reasons.add("end_range")
        records.append(AnomalyRecord.from_instance(inst, ABNORMAL if reasons else NORMAL, reasons))
    return records


ANOMALY_COLUMNS = ("activity", "day", "start_s", "end_s", "duration_s", "sequence_index", "label", "reasons")


def records_to_csv(records: Iterable[AnomalyRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(ANOMALY_COLUMNS)
    for r in records:
        w.writerow([
            r.activity, r.day.isoformat(), repr(r.start_s), repr(r.end_s), repr(r.duration_s),
            r.sequence_index, r.label, ";".join(sorted(r.reasons)),
        ])
    return out.getvalue()


def records_from_csv(text: str) -> list[AnomalyRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != ANOMALY_COLUMNS:
        raise ValueError(f"anomaly dataset header must be {','.join(ANOMALY_COLUMNS)}")
    out = []
    for row in reader:
        reasons = frozenset(r for r in row["reasons"].split(";") if r)
        if reasons - set(REASONS):
            raise ValueError(f"unknown reasons {sorted(reasons - set(REASONS))}")
        if row["label"] not in (NORMAL, ABNORMAL):
            raise ValueError(f"bad label {row['label']!r}")
        out.append(AnomalyRecord(
            row["activity"], date.fromisoformat(row["day"]), float(row["start_s"]), float(row["end_s"]),
            float(row["duration_s"]), int(row["sequence_index"]), row["label"], reasons,
        ))
    return out


@dataclass
class AnomalyModel:
    forest: RandomForestModel
    activities: tuple[str, ...]

    @property
    def activity_codes(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.activities)}

    def matrix(self, records: Sequence[AnomalyRecord]) -> np.ndarray:
        codes = self.activity_codes
        return np.array([r.features(codes) for r in records], dtype=float).reshape(-1, len(ANOMALY_SCHEMA))

    def to_dict(self) -> dict:
        return {"activities": list(self.activities), "forest": model_to_dict(self.forest)}

    @classmethod
    def from_dict(cls, doc: dict) -> "AnomalyModel":
        return cls(model_from_dict(doc["forest"]), tuple(doc["activities"]))


def train_anomaly_model(records: Sequence[AnomalyRecord], config: ForestConfig | None = None) -> AnomalyModel:
    labels = [r.label for r in records]
    if len(set(labels)) < 2:
        raise SingleClassTrainingSet("anomaly training needs both normal and abnormal records")
    activities = tuple(sorted({r.activity for r in records}))
    model = AnomalyModel(None, activities)  # type: ignore[arg-type]
    model.forest = fit_forest(model.matrix(records), labels, config, ANOMALY_SCHEMA)
    return model


def detect(model: AnomalyModel, record: AnomalyRecord) -> tuple[str, dict[str, float], frozenset]:
    shares = model.forest.vote_shares(model.matrix([record]))[0]
    label = model.forest.classes[int(np.argmax(shares))]
    return label, {c: float(s) for c, s in zip(model.forest.classes, shares)}, frozenset()


def relabel(records: Sequence[AnomalyRecord], labels: Sequence[str]) -> list[AnomalyRecord]:
    return [replace(r, label=lab) for r, lab in zip(records, labels)]
