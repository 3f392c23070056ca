"""Oracles and fixtures shared by the unit and acceptance tests."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from homewatch import cli, lstm
from homewatch.analytics import format_clock
from homewatch.synth import DEFAULT_SCENARIO

SINE_DAYS = 200
SINE_PERIOD = 14


def sine_series(n: int = SINE_DAYS, period: int = SINE_PERIOD) -> np.ndarray:
    # shifted to stay nonnegative like a duration series
    t = np.arange(n)
    return 1.0 + np.sin(2 * np.pi * t / period)


def finite_difference_errors(hidden: int = 4, lookback: int = 5, batch: int = 3, eps: float = 1e-5, seed: int = 0):
    """Worst relative error of every parameter's analytic gradient against central differences."""
    rng = np.random.default_rng(seed)
    params = lstm.init_params(hidden, 1, 7, seed)
    # larger weights than the default init so that no gate sits in a trivial regime
    for k in params:
        params[k] = params[k] * 3.0
    X = rng.normal(size=(batch, lookback))
    Y = rng.normal(size=(batch, 7))
    _, grads = lstm.bptt_gradients(params, X, Y)
    worst = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = lstm.mse_loss(params, X, Y)
            p[idx] = old - eps
            down = lstm.mse_loss(params, X, Y)
            p[idx] = old
            num[idx] = (up - down) / (2 * eps)
        denom = np.maximum(np.abs(num) + np.abs(grads[name]), 1e-8)
        worst[name] = float(np.max(np.abs(num - grads[name]) / denom))
    return worst


def sine_benchmark(model: lstm.ForecastModel, values: np.ndarray) -> dict:
    """Held-out raw-unit MSE of the model and of persistence over every test window."""
    split = lstm.chronological_windows(values, model.config)
    pred = np.stack([lstm.forecast(model, x).values for x in split.X_test])
    naive = lstm.persistence_forecast(split.X_test, model.config.horizon)
    return {
        "windows": len(split.X_test),
        "model_mse": float(np.mean((pred - split.Y_test) ** 2)),
        "persistence_mse": float(np.mean((naive - split.Y_test) ** 2)),
    }


def scenario_rules(doc: dict, margin_min: float = 30.0) -> dict:
    """Allowed windows implied by a scenario: nominal start range widened by a margin, end shifted by the duration range."""
    acts = {}
    for a in doc["activities"]:
        lo, hi = (_clock(v) for v in a["start"])
        dmin, dmax = (60.0 * v for v in a["duration_min"])
        m = 60.0 * margin_min
        acts[a["name"]] = {
            "start_window": [format_clock(lo - m), format_clock(hi + m)],
            "end_window": [format_clock(lo - m + dmin), format_clock(hi + m + dmax)],
        }
    return {"z_threshold": 3.0, "activities": acts}


def _clock(v: str) -> float:
    h, m = v.split(":")
    return int(h) * 3600.0 + int(m) * 60.0


def anomaly_scenario(duration_rate: float = 0.04, shift_rate: float = 0.04) -> dict:
    doc = copy.deepcopy(DEFAULT_SCENARIO)
    doc["random_anomalies"] = {"duration_rate": duration_rate, "duration_factor": [5.0, 8.0],
                               "shift_rate": shift_rate, "shift_min": [120.0, 240.0]}
    return doc


def replay_scenario(days: int = 7, start_date: str = "2009-05-01", injections=()) -> dict:
    doc = copy.deepcopy(DEFAULT_SCENARIO)
    doc.update(days=days, start_date=start_date, injections=list(injections))
    return doc


def run(argv) -> int:
    return cli.main([str(a) for a in argv])


def run_cli_pipeline(workdir: Path, seed: int = 7, config: dict | None = None) -> Path:
    """synth -> train-activity -> train-anomaly -> train-forecast -> forecast -> replay, all through the CLI."""
    workdir.mkdir(parents=True, exist_ok=True)
    scenario = workdir / "scenario.json"
    scenario.write_text(json.dumps(anomaly_scenario()))
    rules = workdir / "rules.json"
    rules.write_text(json.dumps(scenario_rules(DEFAULT_SCENARIO)))
    cfg = workdir / "config.json"
    cfg.write_text(json.dumps(config or {"seed": 0, "lstm": {"epochs": 60}}))
    stream = workdir / "stream.json"
    stream.write_text(json.dumps(replay_scenario(injections=[{"day": 3, "activity": "R1_Sleep", "duration_factor": 10}])))
    out = workdir / "out"
    steps = [
        ["synth", "--scenario", scenario, "--seed", seed, "-o", workdir / "history.log"],
        ["synth", "--scenario", stream, "--seed", 99, "-o", workdir / "stream.log"],
        ["train-activity", workdir / "history.log", "--config", cfg, "--out", out],
        ["train-anomaly", workdir / "history.log", "--activity-model", out / "activity_model.json",
         "--rules", rules, "--config", cfg, "--out", out],
        ["train-forecast", "--dataset", out / "anomaly_dataset.csv", "--activity", "R1_Work",
         "--config", cfg, "--out", out / "forecast_model.json"],
        ["forecast", "--dataset", out / "anomaly_dataset.csv", "--activity", "R1_Work",
         "--model", out / "forecast_model.json", "-o", out / "forecast.csv"],
        ["replay", workdir / "stream.log", "--activity-model", out / "activity_model.json",
         "--anomaly-model", out / "anomaly_model.json", "--config", cfg, "-o", out / "alerts.jsonl"],
    ]
    for argv in steps:
        code = run(argv)
        if code != 0:
            raise RuntimeError(f"step {argv[0]} exited with {code}")
    return out


def tree_files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
