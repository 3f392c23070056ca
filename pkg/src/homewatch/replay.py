"""Replay of a sensor log through both classifiers, emitting alerts as JSON lines."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Iterator, Optional, Sequence, TextIO

import numpy as np

from homewatch.analytics import ABNORMAL, AnomalyModel, AnomalyRecord, InstanceTracker, detect
from homewatch.events import SensorEvent
from homewatch.features import StreamTooShort, Window, vectorize_window
from homewatch.pipeline import ActivityClassifier, ModelMissing

ABNORMAL_ACTIVITY = "abnormal_activity"
FORECAST_RISK = "forecast_risk"


@dataclass
class Alert:
    emitted_at: datetime
    kind: str
    activity: str
    detail: dict
    vote_share: float

    def __post_init__(self):
        if not 0.0 <= self.vote_share <= 1.0:
            raise ValueError("vote share outside [0, 1]")

    def to_line(self) -> str:
        # field order is part of the output format
        record = {
            "emitted_at": self.emitted_at.isoformat(timespec="microseconds"),
            "kind": self.kind,
            "activity": self.activity,
            "detail": self.detail,
            "vote_share": round(self.vote_share, 6),
        }
        return json.dumps(record, separators=(",", ":"))


@dataclass
class ReplaySummary:
    events: int = 0
    classified: int = 0
    instances: int = 0
    alerts: int = 0

    def to_line(self) -> str:
        return json.dumps({"summary": {"events": self.events, "classified": self.classified,
                                       "instances": self.instances, "alerts": self.alerts}},
                          separators=(",", ":"))


@dataclass
class Replayer:
    """Single ordered consumer: rolling window, per-event labeling, instance closing, anomaly detection."""

    activity_model: ActivityClassifier
    anomaly_model: AnomalyModel
    min_run: int = 2
    max_gap: Optional[int] = None
    summary: ReplaySummary = field(default_factory=ReplaySummary)

    def __post_init__(self):
        if self.activity_model is None or self.anomaly_model is None:
            raise ModelMissing("replay needs both the activity and the anomaly model")
        self._window: list[SensorEvent] = []
        self._tracker = InstanceTracker(self.min_run, self.max_gap)
        self._last_ts: Optional[datetime] = None

    def _check_instances(self, closed, now: datetime) -> list[Alert]:
        alerts = []
        for inst in closed:
            self.summary.instances += 1
            record = AnomalyRecord.from_instance(inst)
            label, shares, _ = detect(self.anomaly_model, record)
            if label != ABNORMAL:
                continue
            alerts.append(Alert(
                emitted_at=now,
                kind=ABNORMAL_ACTIVITY,
                activity=inst.activity,
                detail={
                    "start": inst.start.isoformat(timespec="microseconds"),
                    "end": inst.end.isoformat(timespec="microseconds"),
                    "duration_s": round(inst.duration_s, 3),
                    "sequence_index": inst.sequence_index,
                },
                vote_share=shares[ABNORMAL],
            ))
        self.summary.alerts += len(alerts)
        return alerts

    def push(self, event: SensorEvent) -> list[Alert]:
        if self._last_ts is not None and event.timestamp < self._last_ts:
            raise ValueError("replay input is not in timestamp order")
        self._last_ts = event.timestamp
        index = self.summary.events
        self.summary.events += 1
        W = self.activity_model.window_size
        self._window.append(event)
        if len(self._window) > W:
            self._window.pop(0)
        if len(self._window) < W:
            return []
        x = vectorize_window(Window(tuple(self._window)), self.activity_model.mi)
        shares = self.activity_model.forest.vote_shares(x)[0]
        label = self.activity_model.forest.classes[int(np.argmax(shares))]
        self.summary.classified += 1
        closed = self._tracker.feed(index, label, event.timestamp)
        return self._check_instances(closed, event.timestamp)

    def finish(self) -> list[Alert]:
        if self.summary.classified == 0:
            raise StreamTooShort(f"stream of {self.summary.events} events is shorter than the window")
        return self._check_instances(self._tracker.flush(), self._last_ts)


def replay(
    events: Iterable[SensorEvent],
    activity_model: ActivityClassifier,
    anomaly_model: AnomalyModel,
    speed: float = 0.0,
    min_run: int = 2,
    max_gap: Optional[int] = None,
    sleep=time.sleep,
) -> Iterator[Alert]:
    """Yield alerts while consuming ``events``; ``speed`` > 0 dilates real time by that factor.

    The returned generator's ``summary`` is available through the Replayer when
    driven with :func:`run_replay`.
    """
    r = Replayer(activity_model, anomaly_model, min_run, max_gap)
    yield from _drive(r, events, speed, sleep)


def _drive(r: Replayer, events: Iterable[SensorEvent], speed: float, sleep) -> Iterator[Alert]:
    prev = None
    for ev in events:
        if speed > 0 and prev is not None:
            sleep(max(0.0, (ev.timestamp - prev).total_seconds() / speed))
        prev = ev.timestamp
        yield from r.push(ev)
    yield from r.finish()


def run_replay(
    events: Sequence[SensorEvent],
    activity_model: ActivityClassifier,
    anomaly_model: AnomalyModel,
    out: TextIO,
    speed: float = 0.0,
    min_run: int = 2,
    max_gap: Optional[int] = None,
    sleep=time.sleep,
) -> ReplaySummary:
    """Write one alert line per alert, then a summary line."""
    r = Replayer(activity_model, anomaly_model, min_run, max_gap)
    for alert in _drive(r, events, speed, sleep):
        out.write(alert.to_line() + "\n")
        out.flush()
    out.write(r.summary.to_line() + "\n")
    return r.summary
