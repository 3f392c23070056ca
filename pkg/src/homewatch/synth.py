"""Synthetic CASAS-format logs with known activities, noise sensors and injected anomalies."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from homewatch.analytics import parse_clock
from homewatch.events import SensorEvent


class BadScenario(ValueError):
    pass


@dataclass
class ActivitySpec:
    name: str
    start: tuple[float, float]  # seconds since midnight, uniform
    duration_min: tuple[float, float]
    sensors: list[str]
    events: tuple[int, int] = (20, 30)


@dataclass
class Injection:
    day: int
    activity: str
    duration_factor: float = 1.0
    start_shift_min: float = 0.0


@dataclass
class Scenario:
    activities: list[ActivitySpec]
    days: int = 30
    start_date: date = date(2009, 2, 2)
    noise_sensors: list[str] = field(default_factory=list)
    noise_rate_per_hour: float = 0.0
    injections: list[Injection] = field(default_factory=list)
    random_duration_rate: float = 0.0
    random_duration_factor: tuple[float, float] = (5.0, 8.0)
    random_shift_rate: float = 0.0
    random_shift_min: tuple[float, float] = (120.0, 240.0)
    min_gap_s: float = 60.0


_TOP_KEYS = {
    "activities", "days", "start_date", "noise", "injections", "random_anomalies", "min_gap_s",
}


def _pair(value, name: str, conv=float) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise BadScenario(f"{name} must be a two-element list")
    lo, hi = conv(value[0]), conv(value[1])
    if lo > hi:
        raise BadScenario(f"{name}: lower bound exceeds upper bound")
    return lo, hi


def scenario_from_dict(doc: dict) -> Scenario:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise BadScenario(f"unknown scenario keys {sorted(unknown)}")
    acts_doc = doc.get("activities")
    if not acts_doc:
        raise BadScenario("scenario lists no activities")
    acts = []
    for a in acts_doc:
        bad = set(a) - {"name", "start", "duration_min", "sensors", "events"}
        if bad:
            raise BadScenario(f"unknown activity keys {sorted(bad)}")
        try:
            spec = ActivitySpec(
                name=a["name"],
                start=_pair(a["start"], "start", parse_clock),
                duration_min=_pair(a["duration_min"], "duration_min"),
                sensors=list(a["sensors"]),
                events=_pair(a.get("events", [20, 30]), "events", int),
            )
        except KeyError as exc:
            raise BadScenario(f"activity missing key {exc}") from exc
        if not spec.sensors or spec.events[0] < 2 or spec.duration_min[0] <= 0:
            raise BadScenario(f"activity {spec.name}: needs sensors, >=2 events and positive duration")
        acts.append(spec)
    names = [a.name for a in acts]
    if len(set(names)) != len(names):
        raise BadScenario("duplicate activity names")

    noise = doc.get("noise") or {}
    if set(noise) - {"sensors", "rate_per_hour"}:
        raise BadScenario("unknown noise keys")
    rand = doc.get("random_anomalies") or {}
    if set(rand) - {"duration_rate", "duration_factor", "shift_rate", "shift_min"}:
        raise BadScenario("unknown random_anomalies keys")
    injections = []
    for inj in doc.get("injections") or []:
        if inj.get("activity") not in names:
            raise BadScenario(f"injection names unknown activity {inj.get('activity')!r}")
        injections.append(Injection(int(inj["day"]), inj["activity"], float(inj.get("duration_factor", 1.0)),
                                    float(inj.get("start_shift_min", 0.0))))
    sc = Scenario(
        activities=acts,
        days=int(doc.get("days", 30)),
        start_date=date.fromisoformat(doc.get("start_date", "2009-02-02")),
        noise_sensors=list(noise.get("sensors", [])),
        noise_rate_per_hour=float(noise.get("rate_per_hour", 0.0)),
        injections=injections,
        random_duration_rate=float(rand.get("duration_rate", 0.0)),
        random_duration_factor=_pair(rand.get("duration_factor", [5.0, 8.0]), "duration_factor"),
        random_shift_rate=float(rand.get("shift_rate", 0.0)),
        random_shift_min=_pair(rand.get("shift_min", [120.0, 240.0]), "shift_min"),
        min_gap_s=float(doc.get("min_gap_s", 60.0)),
    )
    if sc.days < 1:
        raise BadScenario("days must be >= 1")
    if sc.noise_rate_per_hour < 0 or (sc.noise_rate_per_hour > 0 and not sc.noise_sensors):
        raise BadScenario("noise rate needs a non-empty sensor list")
    return sc


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def _value(sensor: str, rng: np.random.Generator, k: int) -> str:
    if sensor.startswith("AD1"):
        return f"{rng.uniform(0.05, 3.0):.4f}"
    if sensor.startswith("D"):
        return ("OPEN", "CLOSE")[k % 2]
    if sensor.startswith("I"):
        return ("ABSENT", "PRESENT")[k % 2]
    return ("ON", "OFF")[k % 2]


def _jitter(ts: datetime) -> datetime:
    return ts.replace(microsecond=(ts.microsecond // 1000) * 1000)


def generate(scenario: Scenario, seed: int = 0) -> list[SensorEvent]:
    """Time-ordered labeled events; each instance's first/last event carry begin/end markers."""
    rng = np.random.default_rng(seed)
    midnight0 = datetime.combine(scenario.start_date, datetime.min.time())
    inject = {(i.day, i.activity): i for i in scenario.injections}
    order = sorted(scenario.activities, key=lambda a: a.start[0])
    events: list[tuple[datetime, int, SensorEvent]] = []
    seq = 0
    cursor = midnight0
    for day in range(scenario.days):
        midnight = midnight0 + timedelta(days=day)
        for act in order:
            start_s = rng.uniform(*act.start)
            dur_s = rng.uniform(*act.duration_min) * 60.0
            n_ev = int(rng.integers(act.events[0], act.events[1] + 1))
            if scenario.random_duration_rate and rng.random() < scenario.random_duration_rate:
                dur_s *= rng.uniform(*scenario.random_duration_factor)
            if scenario.random_shift_rate and rng.random() < scenario.random_shift_rate:
                start_s += rng.choice([-1.0, 1.0]) * rng.uniform(*scenario.random_shift_min) * 60.0
            inj = inject.get((day, act.name))
            if inj is not None:
                dur_s *= inj.duration_factor
                start_s += inj.start_shift_min * 60.0
            start = max(midnight + timedelta(seconds=start_s), cursor + timedelta(seconds=scenario.min_gap_s))
            start = _jitter(start)
            end = _jitter(start + timedelta(seconds=dur_s))
            offsets = np.sort(rng.uniform(0.0, (end - start).total_seconds(), size=n_ev - 2))
            times = [start] + [_jitter(start + timedelta(seconds=float(o))) for o in offsets] + [end]
            sensors = rng.choice(act.sensors, size=n_ev)
            for k, (ts, s) in enumerate(zip(times, sensors)):
                ann = (act.name, "begin") if k == 0 else (act.name, "end") if k == n_ev - 1 else None
                events.append((ts, seq, SensorEvent(ts, str(s), _value(str(s), rng, k), ann)))
                seq += 1
            cursor = end

    if scenario.noise_rate_per_hour > 0:
        horizon_s = (max(cursor, midnight0 + timedelta(days=scenario.days)) - midnight0).total_seconds()
        n_noise = int(rng.poisson(scenario.noise_rate_per_hour * horizon_s / 3600.0))
        offsets = np.sort(rng.uniform(0.0, horizon_s, size=n_noise))
        sensors = rng.choice(scenario.noise_sensors, size=n_noise)
        for k, (o, s) in enumerate(zip(offsets, sensors)):
            ts = _jitter(midnight0 + timedelta(seconds=float(o)))
            events.append((ts, seq, SensorEvent(ts, str(s), _value(str(s), rng, k))))
            seq += 1

    # equal timestamps keep generation order: activity events precede noise
    events.sort(key=lambda t: (t[0], t[1]))
    return [e for _, _, e in events]


def write_log(events: Sequence[SensorEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(e.to_line() + "\n")


DEFAULT_SCENARIO = {
    "days": 60,
    "start_date": "2009-02-02",
    "min_gap_s": 60,
    "noise": {"sensors": ["M40", "M41", "I05"], "rate_per_hour": 0.5},
    "activities": [
        {"name": "R1_Sleep", "start": ["00:50", "01:10"], "duration_min": [36, 44],
         "sensors": ["M01", "M02", "M03"], "events": [20, 30]},
        {"name": "R1_Personal_Hygiene", "start": ["08:50", "09:10"], "duration_min": [13, 17],
         "sensors": ["M10", "M11", "AD1-B"], "events": [15, 25]},
        {"name": "R1_Meal_Preparation", "start": ["11:50", "12:10"], "duration_min": [27, 33],
         "sensors": ["M15", "M16", "I01", "AD1-A"], "events": [20, 30]},
        {"name": "R1_Work", "start": ["14:50", "15:10"], "duration_min": [54, 66],
         "sensors": ["M20", "M21", "M22"], "events": [20, 30]},
        {"name": "R2_Personal_Hygiene", "start": ["18:20", "18:40"], "duration_min": [13, 17],
         "sensors": ["M30", "M31", "AD1-C"], "events": [15, 25]},
        {"name": "R2_Leave_Home", "start": ["20:50", "21:10"], "duration_min": [36, 44],
         "sensors": ["D01", "D02", "L01"], "events": [15, 25]},
    ],
}
