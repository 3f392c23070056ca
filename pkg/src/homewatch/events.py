"""Parsing of CASAS-style sensor logs and reconstruction of annotated activity segments."""
from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterable, Iterator, Optional, Sequence

logger = logging.getLogger(__name__)

OTHER_ACTIVITY = "Other_Activity"
MARKERS = ("begin", "end")

_FIELD_SPLIT = re.compile(r"[ \t]+")


class ParseError(ValueError):
    """Base class for a line that cannot be turned into a SensorEvent."""


class MalformedLine(ParseError):
    pass


class BadTimestamp(ParseError):
    pass


class BadMarker(ParseError):
    pass


def sensor_kind(code: str) -> str:
    if code.startswith("AD1-"):
        return {"AD1-A": "burner", "AD1-B": "hot-water", "AD1-C": "cold-water"}.get(code, "other")
    return {"M": "motion", "I": "item", "D": "door", "L": "light"}.get(code[:1], "other")


@dataclass(frozen=True)
class SensorEvent:
    timestamp: datetime
    sensor: str
    value: str
    annotation: Optional[tuple[str, str]] = None

    @property
    def kind(self) -> str:
        return sensor_kind(self.sensor)

    def to_line(self) -> str:
        parts = [
            self.timestamp.strftime("%Y-%m-%d"),
            self.timestamp.strftime("%H:%M:%S.%f"),
            self.sensor,
            self.value,
        ]
        if self.annotation is not None:
            parts.extend(self.annotation)
        return " ".join(parts)


@dataclass(frozen=True)
class LabeledSegment:
    activity: str
    start: datetime
    end: datetime
    event_indices: tuple[int, ...]
    unmatched: bool = False


@dataclass
class ParseReport:
    lines: int = 0
    events: int = 0
    malformed: int = 0
    reordered: int = 0
    segments: int = 0
    unmatched_begin: int = 0
    unmatched_end: int = 0
    errors: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "lines": self.lines,
            "events": self.events,
            "malformed": self.malformed,
            "reordered": self.reordered,
            "segments": self.segments,
            "unmatched_begin": self.unmatched_begin,
            "unmatched_end": self.unmatched_end,
        }


@dataclass(frozen=True)
class EventDataset:
    events: tuple[SensorEvent, ...]
    segments: tuple[LabeledSegment, ...]
    sensor_registry: tuple[str, ...]
    report: ParseReport = field(default_factory=ParseReport, compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def timestamps(self) -> list[datetime]:
        return [e.timestamp for e in self.events]

    def to_lines(self) -> Iterator[str]:
        for e in self.events:
            yield e.to_line()


def _parse_timestamp(date: str, time: str) -> datetime:
    text = f"{date} {time}"
    fmt = "%Y-%m-%d %H:%M:%S.%f" if "." in time else "%Y-%m-%d %H:%M:%S"
    try:
        return datetime.strptime(text, fmt)
    except ValueError as exc:
        raise BadTimestamp(f"bad timestamp {text!r}") from exc


def parse_line(line: str) -> SensorEvent:
    """Parse one log line of the form ``date time sensor value [activity begin|end]``."""
    fields = [f for f in _FIELD_SPLIT.split(line.strip()) if f]
    if len(fields) not in (4, 6):
        if len(fields) == 5:
            raise BadMarker(f"activity without marker: {line.strip()!r}")
        raise MalformedLine(f"expected 4 or 6 fields, got {len(fields)}: {line.strip()!r}")
    date, time, sensor, value = fields[:4]
    ts = _parse_timestamp(date, time)
    annotation = None
    if len(fields) == 6:
        activity, marker = fields[4], fields[5]
        if marker not in MARKERS:
            raise BadMarker(f"marker must be begin/end, got {marker!r}")
        annotation = (activity, marker)
    return SensorEvent(ts, sensor, value, annotation)


def _reconstruct_segments(
    events: Sequence[SensorEvent], report: ParseReport
) -> list[LabeledSegment]:
    # (activity, begin index, end index, unmatched flag)
    spans: list[tuple[str, int, int, bool]] = []
    open_begins: dict[str, deque[int]] = {}
    last_seen: dict[str, int] = {}
    for i, ev in enumerate(events):
        if ev.annotation is None:
            continue
        activity, marker = ev.annotation
        last_seen[activity] = i
        if marker == "begin":
            open_begins.setdefault(activity, deque()).append(i)
        else:
            pending = open_begins.get(activity)
            if pending:
                spans.append((activity, pending.popleft(), i, False))
            else:
                report.unmatched_end += 1
                logger.warning("unmatched end for %s at event %d", activity, i)
    for activity, pending in open_begins.items():
        for b in pending:
            report.unmatched_begin += 1
            logger.warning("unmatched begin for %s at event %d", activity, b)
            spans.append((activity, b, max(b, last_seen[activity]), True))

    spans.sort(key=lambda s: (s[1], s[2], s[0]))
    segments = []
    for activity, b, e, unmatched in spans:
        indices = tuple(
            k
            for k in range(b, e + 1)
            if events[k].annotation is None or events[k].annotation[0] == activity
        )
        segments.append(
            LabeledSegment(activity, events[b].timestamp, events[e].timestamp, indices, unmatched)
        )
    return segments


def parse_dataset(lines: Iterable[str], strict: bool = False) -> EventDataset:
    """Parse a whole log.

    Malformed lines are counted and skipped unless ``strict`` is set. Events are
    stably sorted by timestamp; ``report.reordered`` counts events whose position
    changed.
    """
    report = ParseReport()
    parsed: list[SensorEvent] = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        report.lines += 1
        try:
            parsed.append(parse_line(line))
        except ParseError as exc:
            if strict:
                raise
            report.malformed += 1
            if len(report.errors) < 20:
                report.errors.append(f"line {lineno}: {exc}")

    order = sorted(range(len(parsed)), key=lambda k: parsed[k].timestamp)
    report.reordered = sum(1 for pos, k in enumerate(order) if pos != k)
    events = tuple(parsed[k] for k in order)
    report.events = len(events)

    segments = _reconstruct_segments(events, report)
    report.segments = len(segments)
    registry = tuple(dict.fromkeys(e.sensor for e in events))
    return EventDataset(events, tuple(segments), registry, report)


def load_dataset(path, strict: bool = False) -> EventDataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh, strict=strict)


def write_events(events: Iterable[SensorEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(e.to_line() + "\n")


def label_events(ds: EventDataset) -> list[str]:
    """One activity label per event.

    Events covered by several segments (concurrent residents) take the segment
    whose begin is the latest one before the event; uncovered events get
    ``Other_Activity``.
    """
    labels = [OTHER_ACTIVITY] * len(ds.events)
    best_begin = [-1] * len(ds.events)
    for seg in ds.segments:
        if not seg.event_indices:
            continue
        begin = seg.event_indices[0]
        for k in seg.event_indices:
            if begin >= best_begin[k]:
                best_begin[k] = begin
                labels[k] = seg.activity
    return labels
