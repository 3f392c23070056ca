import itertools
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homewatch.events import parse_dataset, SensorEvent
from homewatch.features import (
    MIMatrix,
    NoSegments,
    StreamTooShort,
    Window,
    compute_mi_matrix,
    feature_schema,
    make_windows,
    vectorize_stream,
    vectorize_window,
)

T0 = datetime(2009, 2, 2, 8, 0, 0)


def _log(segments, gap_sensors=("N1",)):
    """Lines for consecutive segments; each entry is (activity, [sensors])."""
    lines, t = [], T0
    for k, (act, sens) in enumerate(segments):
        for j, s in enumerate(sens):
            ann = ""
            if j == 0:
                ann = f" {act} begin"
            if j == len(sens) - 1:
                ann = f" {act} end" if len(sens) > 1 else ann
            lines.append(f"{t:%Y-%m-%d %H:%M:%S.%f} {s} ON{ann}")
            t += timedelta(seconds=5)
        for s in gap_sensors:
            lines.append(f"{t:%Y-%m-%d %H:%M:%S.%f} {s} ON")
            t += timedelta(seconds=5)
    return lines


def brute_force_mi(ds):
    """Independent oracle: for every segment and every sensor pair, test joint membership."""
    sensors = ds.sensor_registry
    out = np.zeros((len(sensors), len(sensors)))
    for seg in ds.segments:
        fired = [ds.events[i].sensor for i in seg.event_indices]
        for a, b in itertools.product(range(len(sensors)), repeat=2):
            if sensors[a] in fired and sensors[b] in fired:
                out[a, b] += 1
    return out / len(ds.segments)


def test_mi_single_segment():
    ds = parse_dataset(_log([("A", ["M1", "M2", "M1"])]))
    mi = compute_mi_matrix(ds)
    assert mi("M1", "M2") == 1.0


def test_mi_two_segments():
    ds = parse_dataset(_log([("A", ["M1", "M2"]), ("B", ["M1", "M3"])]))
    mi = compute_mi_matrix(ds)
    assert mi("M1", "M2") == 0.5
    assert mi("M1", "M1") == 1.0
    assert mi("N1", "M1") == 0.0


def test_mi_five_segment_toy_matches_enumeration():
    segs = [
        ("A", ["M1", "M2", "M3"]),
        ("B", ["M2", "M4"]),
        ("A", ["M1", "M3", "M1"]),
        ("C", ["M5", "M6", "M2"]),
        ("B", ["M4", "M6"]),
    ]
    ds = parse_dataset(_log(segs, gap_sensors=()))
    mi = compute_mi_matrix(ds)
    np.testing.assert_array_equal(mi.values, brute_force_mi(ds))
    assert mi("M1", "M3") == 2 / 5
    assert mi("M2", "M2") == 3 / 5


def test_mi_activity_grouping():
    ds = parse_dataset(_log([("A", ["M1", "M2"]), ("A", ["M3", "M4"]), ("B", ["M1", "M5"])]))
    assert compute_mi_matrix(ds, "instance")("M1", "M3") == 0.0
    assert compute_mi_matrix(ds, "activity")("M1", "M3") == 0.5


def test_mi_requires_segments():
    ds = parse_dataset(["2009-02-02 10:00:00 M1 ON"])
    with pytest.raises(NoSegments):
        compute_mi_matrix(ds)


def test_mi_text_round_trip():
    ds = parse_dataset(_log([("A", ["M1", "M2"]), ("B", ["M1", "M3"]), ("C", ["M3"] * 2)]))
    mi = compute_mi_matrix(ds)
    text = mi.to_text()
    assert text.splitlines()[0] == "sensor," + ",".join(mi.sensors)
    assert "0.666667" in text and "0.333333" in text
    back = MIMatrix.from_text(text)
    np.testing.assert_allclose(back.values, mi.values, atol=5e-7)


@st.composite
def random_logs(draw):
    n_seg = draw(st.integers(1, 6))
    segs = []
    for _ in range(n_seg):
        segs.append((draw(st.sampled_from("ABC")), draw(st.lists(st.sampled_from(["M1", "M2", "M3", "D1", "I1"]), min_size=2, max_size=6))))
    return _log(segs, gap_sensors=draw(st.sampled_from([(), ("N1",), ("N1", "M2")])))


@settings(max_examples=100, deadline=None)
@given(random_logs())
def test_mi_symmetry_and_range(lines):
    ds = parse_dataset(lines)
    mi = compute_mi_matrix(ds)
    np.testing.assert_array_equal(mi.values, mi.values.T)
    assert (mi.values >= 0).all() and (mi.values <= 1).all()
    np.testing.assert_array_equal(mi.values, brute_force_mi(ds))


def _events(sensors, step=10):
    return [SensorEvent(T0 + timedelta(seconds=step * k), s, "ON") for k, s in enumerate(sensors)]


def test_window_counts():
    ev = _events(["M1"] * 25)
    assert len(make_windows(ev[:20], 20)) == 1
    labels = [f"L{k}" for k in range(25)]
    ws = make_windows(ev, 20, labels)
    assert len(ws) == 6
    assert [w.label for w in ws] == labels[19:25]
    with pytest.raises(StreamTooShort):
        make_windows(ev[:19], 20)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 40))
def test_window_count_identity(w, extra):
    ev = _events(["M1"] * (w + extra))
    assert len(make_windows(ev, w)) == extra + 1


def _mi(sensors, values):
    return MIMatrix(tuple(sensors), np.array(values, dtype=float))


def test_vectorize_hand_sum():
    mi = _mi(["M1", "M2"], [[0.8, 0.25], [0.25, 1.0]])
    w = Window(tuple(_events(["M1", "M2", "M1"])))
    vec = vectorize_window(w, mi)
    assert vec[0] == pytest.approx(1.6)
    assert vec[1] == pytest.approx(0.25)
    assert vec[2] == 8 * 3600 + 20  # end time of day
    assert vec[3] == 20.0  # duration
    assert (vec[4], vec[5]) == (0, 1)


def test_vectorize_single_sensor_window():
    mi = _mi(["M1", "M2"], [[1.0, 0.0], [0.0, 1.0]])
    vec = vectorize_window(Window(tuple(_events(["M1"] * 20))), mi)
    assert vec[0] == 20 and vec[1] == 0


def test_disruptive_sensor_gets_zero_weight():
    mi = _mi(["M1", "M2"], [[1.0, 0.0], [0.0, 1.0]])
    vec = vectorize_window(Window(tuple(_events(["M2", "M2", "M1"]))), mi)
    assert vec[1] == 0.0 and vec[0] == 1.0


def test_unknown_sensor_reserved_index(caplog):
    mi = _mi(["M1"], [[1.0]])
    vec = vectorize_window(Window(tuple(_events(["X9", "M1", "X9"]))), mi)
    assert vec[0] == 0.0  # last sensor unknown -> weight 0
    assert vec[3] == 1 and vec[4] == 0  # reserved code == len(sensors)
    assert "unknown sensors" in caplog.text


def test_day_boundary_duration():
    ev = [SensorEvent(datetime(2009, 2, 2, 23, 59, 50), "M1", "ON"), SensorEvent(datetime(2009, 2, 3, 0, 0, 5), "M1", "ON")]
    vec = vectorize_window(Window(tuple(ev)), _mi(["M1"], [[1.0]]))
    assert vec[1] == 5.0 and vec[2] == 15.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["M1", "M2", "M3", "D1"]), min_size=6, max_size=30), st.integers(2, 6),
       st.lists(st.floats(0, 1), min_size=16, max_size=16))
def test_stream_matches_per_window(sensors, w, vals):
    m = np.array(vals).reshape(4, 4)
    mi = _mi(["M1", "M2", "M3", "D1"], (m + m.T) / 2)
    ev = _events(sensors, step=7)
    X = vectorize_stream(ev, mi, w)
    ws = make_windows(ev, w)
    assert X.shape == (len(ev) - w + 1, 4 + 4)
    for row, win in zip(X, ws):
        np.testing.assert_allclose(row, vectorize_window(win, mi), rtol=0, atol=1e-12)
    assert (X[:, 5] >= 0).all() and (X[:, 4] < 86400).all()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["M1", "M2", "M3"]), min_size=5, max_size=12), st.randoms(use_true_random=False))
def test_permuting_early_events_keeps_counts(sensors, rnd):
    mi = _mi(["M1", "M2", "M3"], [[1, 0.3, 0.1], [0.3, 0.7, 0.5], [0.1, 0.5, 0.9]])
    ev = _events(sensors)
    head = [e.sensor for e in ev[:-2]]
    rnd.shuffle(head)
    shuffled = [SensorEvent(e.timestamp, s, "ON") for e, s in zip(ev, head + sensors[-2:])]
    a = vectorize_window(Window(tuple(ev)), mi)
    b = vectorize_window(Window(tuple(shuffled)), mi)
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
    np.testing.assert_array_equal(a[3:], b[3:])


def test_schema_dimension():
    schema = feature_schema(["M1", "M2"])
    assert len(schema) == 6
    assert schema.kinds[-2:] == ("categorical", "categorical")
    assert schema.kinds.count("categorical") == 2
