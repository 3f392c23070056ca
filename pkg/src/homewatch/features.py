"""Sensor-count windows, co-activation (MI) weighting and window vectorization."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from homewatch.events import EventDataset, SensorEvent

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 20
NUMERIC = "numeric"
CATEGORICAL = "categorical"
_EPOCH = datetime(1970, 1, 1)
_MICROSECOND = timedelta(microseconds=1)


class NoSegments(ValueError):
    pass


class StreamTooShort(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds differ in length")
        bad = set(self.kinds) - {NUMERIC, CATEGORICAL}
        if bad:
            raise ValueError(f"unknown feature kinds {bad}")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([k == CATEGORICAL for k in self.kinds], dtype=bool)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "kinds": list(self.kinds)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(d["names"]), tuple(d["kinds"]))


@dataclass(frozen=True)
class MIMatrix:
    sensors: tuple[str, ...]
    values: np.ndarray

    def index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.sensors)}

    def __call__(self, a: str, b: str) -> float:
        idx = self.index()
        return float(self.values[idx[a], idx[b]])

    def to_text(self, delimiter: str = ",") -> str:
        out = io.StringIO()
        out.write(delimiter.join(["sensor", *self.sensors]) + "\n")
        for s, row in zip(self.sensors, self.values):
            out.write(delimiter.join([s, *(f"{v:.6f}" for v in row)]) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str, delimiter: str = ",") -> "MIMatrix":
        rows = [line.split(delimiter) for line in text.strip().splitlines()]
        sensors = tuple(rows[0][1:])
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
        if values.shape != (len(sensors), len(sensors)):
            raise ValueError("MI matrix is not square")
        return cls(sensors, values)

    def to_dict(self) -> dict:
        return {"sensors": list(self.sensors), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MIMatrix":
        return cls(tuple(d["sensors"]), np.asarray(d["values"], dtype=float))


def compute_mi_matrix(ds: EventDataset, per: str = "instance") -> MIMatrix:
    """Pairwise co-activation frequency of sensors over labeled activities.

    ``per="instance"`` averages over segments; ``per="activity"`` pools all
    segments of one activity name into a single sequence first.
    """
    if not ds.segments:
        raise NoSegments("dataset has no labeled segments")
    if per not in ("instance", "activity"):
        raise ValueError(f"unknown MI grouping {per!r}")
    index = {s: i for i, s in enumerate(ds.sensor_registry)}
    groups: dict = {}
    for k, seg in enumerate(ds.segments):
        key = k if per == "instance" else seg.activity
        groups.setdefault(key, set()).update(ds.events[i].sensor for i in seg.event_indices)
    fired = np.zeros((len(groups), len(index)), dtype=float)
    for row, sensors in enumerate(groups.values()):
        fired[row, [index[s] for s in sensors]] = 1.0
    values = fired.T @ fired / len(groups)
    return MIMatrix(ds.sensor_registry, values)


@dataclass(frozen=True)
class Window:
    events: tuple[SensorEvent, ...]
    label: str | None = None


def make_windows(
    events: Sequence[SensorEvent], window_size: int = DEFAULT_WINDOW, labels: Sequence[str] | None = None
) -> list[Window]:
    if window_size < 2:
        raise ValueError("window size must be at least 2")
    n = len(events)
    if n < window_size:
        raise StreamTooShort(f"{n} events < window size {window_size}")
    out = []
    for i in range(n - window_size + 1):
        last = i + window_size - 1
        out.append(Window(tuple(events[i : last + 1]), labels[last] if labels is not None else None))
    return out


def feature_schema(sensors: Sequence[str]) -> FeatureSchema:
    names = [f"w_{s}" for s in sensors] + ["end_time_s", "duration_s", "last_sensor", "prev_sensor"]
    kinds = [NUMERIC] * (len(sensors) + 2) + [CATEGORICAL, CATEGORICAL]
    return FeatureSchema(tuple(names), tuple(kinds))


def seconds_since_midnight(ts: datetime) -> float:
    return ts.hour * 3600 + ts.minute * 60 + ts.second + ts.microsecond / 1e6


def _sensor_codes(sensors: Sequence[str], mi: MIMatrix) -> np.ndarray:
    index = mi.index()
    unknown = len(mi.sensors)
    codes = np.fromiter((index.get(s, unknown) for s in sensors), dtype=np.int64, count=len(sensors))
    if (codes == unknown).any():
        missing = sorted({s for s in sensors if s not in index})
        logger.warning("unknown sensors mapped to reserved index: %s", ", ".join(missing))
    return codes


def _padded_mi(mi: MIMatrix) -> np.ndarray:
    # extra row/column for the reserved unknown sensor, always weight 0
    n = len(mi.sensors)
    padded = np.zeros((n + 1, n + 1))
    padded[:n, :n] = mi.values
    return padded


def vectorize_window(w: Window, mi: MIMatrix) -> np.ndarray:
    """Feature vector of one window: MI-weighted sensor counts, end time, duration, last two sensors."""
    n = len(mi.sensors)
    codes = _sensor_codes([e.sensor for e in w.events], mi)
    weights = _padded_mi(mi)
    last = codes[-1]
    vec = np.zeros(n + 4)
    for c in codes:
        if c < n:
            vec[c] += weights[c, last]
    vec[n] = seconds_since_midnight(w.events[-1].timestamp)
    vec[n + 1] = (w.events[-1].timestamp - w.events[0].timestamp).total_seconds()
    vec[n + 2] = last
    vec[n + 3] = codes[-2]
    return vec


def vectorize_stream(events: Sequence[SensorEvent], mi: MIMatrix, window_size: int = DEFAULT_WINDOW) -> np.ndarray:
    """All sliding windows of a stream at once; row i equals vectorize_window of window i."""
    n_events = len(events)
    if n_events < window_size:
        raise StreamTooShort(f"{n_events} events < window size {window_size}")
    n = len(mi.sensors)
    codes = _sensor_codes([e.sensor for e in events], mi)
    weights = _padded_mi(mi)
    epoch_us = np.array([(e.timestamp - _EPOCH) // _MICROSECOND for e in events], dtype=np.int64)
    tod = np.array([seconds_since_midnight(e.timestamp) for e in events])

    win = np.lib.stride_tricks.sliding_window_view(codes, window_size)
    n_win = win.shape[0]
    last = win[:, -1]
    w = weights[win, last[:, None]]
    counts = np.zeros((n_win, n + 1))
    rows = np.repeat(np.arange(n_win), window_size)
    np.add.at(counts, (rows, win.ravel()), w.ravel())

    X = np.empty((n_win, n + 4))
    X[:, :n] = counts[:, :n]
    X[:, n] = tod[window_size - 1 :]
    X[:, n + 1] = (epoch_us[window_size - 1 :] - epoch_us[:n_win]) / 1e6
    X[:, n + 2] = last
    X[:, n + 3] = win[:, -2]
    return X
