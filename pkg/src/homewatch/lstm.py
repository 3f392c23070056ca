"""Single-layer LSTM with a direct multi-step head, trained by hand-written BPTT and Adam."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MODEL_FORMAT = "homewatch-lstm"
MODEL_VERSION = 1

GATES = ("f", "i", "c", "o")
PARAM_NAMES = (
    "W_fh", "W_fx", "b_f",
    "W_ih", "W_ix", "b_i",
    "W_ch", "W_cx", "b_c",
    "W_oh", "W_ox", "b_o",
    "W_y", "b_y",
)


class ShapeMismatch(ValueError):
    pass


class BadWindowLength(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class SeriesTooShort(ValueError):
    pass


class ModelFileError(ValueError):
    pass


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_params(hidden_size: int, input_size: int = 1, horizon: int = 7, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hidden_size)
    shapes = {}
    for g in GATES:
        shapes[f"W_{g}h"] = (hidden_size, hidden_size)
        shapes[f"W_{g}x"] = (hidden_size, input_size)
        shapes[f"b_{g}"] = (hidden_size,)
    shapes["W_y"] = (horizon, hidden_size)
    shapes["b_y"] = (horizon,)
    return {name: rng.uniform(-bound, bound, size=shapes[name]) for name in PARAM_NAMES}


def zero_params(hidden_size: int, input_size: int = 1, horizon: int = 7) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in init_params(hidden_size, input_size, horizon).items()}


@dataclass
class LSTMState:
    h: np.ndarray
    c: np.ndarray


def cell_forward(params: dict, x_t: np.ndarray, prev: LSTMState) -> tuple[LSTMState, dict]:
    """One step of the cell; works on a single vector or a (batch, features) array."""
    x_t = np.asarray(x_t, dtype=float)
    hidden, n_in = params["W_fx"].shape
    if x_t.shape[-1] != n_in or prev.h.shape[-1] != hidden or prev.c.shape != prev.h.shape:
        raise ShapeMismatch(f"x {x_t.shape}, h {prev.h.shape}, c {prev.c.shape} vs hidden={hidden} input={n_in}")
    h_prev, c_prev = prev.h, prev.c

    def pre(g):
        return h_prev @ params[f"W_{g}h"].T + x_t @ params[f"W_{g}x"].T + params[f"b_{g}"]

    f = sigmoid(pre("f"))
    i = sigmoid(pre("i"))
    g = np.tanh(pre("c"))
    c = f * c_prev + i * g
    o = sigmoid(pre("o"))
    tc = np.tanh(c)
    h = o * tc
    cache = {"x": x_t, "h_prev": h_prev, "c_prev": c_prev, "f": f, "i": i, "g": g, "o": o, "tanh_c": tc}
    return LSTMState(h, c), cache


def unroll(params: dict, X: np.ndarray) -> tuple[np.ndarray, list[dict]]:
    """Run the cell over ``X`` of shape (batch, steps, input) from a zero state."""
    batch, steps, _ = X.shape
    hidden = params["W_fh"].shape[0]
    state = LSTMState(np.zeros((batch, hidden)), np.zeros((batch, hidden)))
    caches = []
    for t in range(steps):
        state, cache = cell_forward(params, X[:, t, :], state)
        caches.append(cache)
    y = state.h @ params["W_y"].T + params["b_y"]
    return y, caches


def _as_batch(windows: np.ndarray) -> np.ndarray:
    X = np.asarray(windows, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim == 2:
        X = X[:, :, None]
    return X


def mse_loss(params: dict, windows: np.ndarray, targets: np.ndarray) -> float:
    y, _ = unroll(params, _as_batch(windows))
    return float(np.mean((y - np.asarray(targets, dtype=float).reshape(y.shape)) ** 2))


def bptt_gradients(params: dict, windows: np.ndarray, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared-error loss and its exact gradient for every parameter."""
    X = _as_batch(windows)
    if len(X) == 0:
        raise ValueError("empty batch")
    y, caches = unroll(params, X)
    T = np.asarray(targets, dtype=float).reshape(y.shape)
    err = y - T
    loss = float(np.mean(err**2))
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dy = 2.0 * err / err.size
    h_last = caches[-1]["o"] * caches[-1]["tanh_c"]
    grads["W_y"] = dy.T @ h_last
    grads["b_y"] = dy.sum(axis=0)
    dh = dy @ params["W_y"]
    dc = np.zeros_like(dh)
    for cache in reversed(caches):
        f, i, g, o, tc = cache["f"], cache["i"], cache["g"], cache["o"], cache["tanh_c"]
        dc = dc + dh * o * (1.0 - tc**2)
        d_pre = {
            "o": dh * tc * o * (1.0 - o),
            "f": dc * cache["c_prev"] * f * (1.0 - f),
            "i": dc * g * i * (1.0 - i),
            "c": dc * i * (1.0 - g**2),
        }
        dh = np.zeros_like(dh)
        for gate, d in d_pre.items():
            grads[f"W_{gate}h"] += d.T @ cache["h_prev"]
            grads[f"W_{gate}x"] += d.T @ cache["x"]
            grads[f"b_{gate}"] += d.sum(axis=0)
            dh += d @ params[f"W_{gate}h"]
        dc = dc * f
    return loss, grads


@dataclass
class LSTMConfig:
    hidden_size: int = 32
    lookback: int = 21
    horizon: int = 7
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: Optional[int] = 32
    train_ratio: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.hidden_size < 1 or self.lookback < 1 or self.horizon < 1:
            raise ValueError("hidden_size, lookback and horizon must be positive")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 < self.train_ratio <= 1:
            raise ValueError("train_ratio must be in (0, 1]")


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in PARAM_NAMES:
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k]
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] ** 2
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class MinMaxScaler:
    min: float
    max: float

    @property
    def degenerate(self) -> bool:
        return self.max == self.min

    def scale(self, x):
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return np.zeros_like(x)
        return (x - self.min) / (self.max - self.min)

    def unscale(self, z):
        z = np.asarray(z, dtype=float)
        if self.degenerate:
            return np.full_like(z, self.min)
        return z * (self.max - self.min) + self.min


@dataclass
class ForecastModel:
    params: dict[str, np.ndarray]
    scaler: MinMaxScaler
    config: LSTMConfig
    reference: tuple[float, float] = (0.0, 0.0)  # training-portion mean and population std
    history: dict = field(default_factory=dict)

    def predict_scaled(self, windows: np.ndarray) -> np.ndarray:
        X = _as_batch(windows)
        if X.shape[1] != self.config.lookback:
            raise BadWindowLength(f"window length {X.shape[1]} != lookback {self.config.lookback}")
        y, _ = unroll(self.params, X)
        return y


def forward_sequence(model: ForecastModel, window: Sequence[float]) -> np.ndarray:
    """Scaled window of ``lookback`` values to ``horizon`` scaled predictions."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 1 or len(window) != model.config.lookback:
        raise BadWindowLength(f"expected {model.config.lookback} values, got {window.shape}")
    return model.predict_scaled(window)[0]


def sliding_windows(values: np.ndarray, lookback: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(values) - lookback - horizon + 1
    if n <= 0:
        return np.empty((0, lookback)), np.empty((0, horizon))
    X = np.stack([values[k : k + lookback] for k in range(n)])
    Y = np.stack([values[k + lookback : k + lookback + horizon] for k in range(n)])
    return X, Y


@dataclass
class SplitWindows:
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    n_train_days: int


def chronological_windows(values: np.ndarray, config: LSTMConfig) -> SplitWindows:
    """Training windows lie wholly in the first ``train_ratio`` of days; test windows forecast days after it."""
    n = len(values)
    n_train = int(round(config.train_ratio * n))
    L, H = config.lookback, config.horizon
    X, Y = sliding_windows(values, L, H)
    starts = np.arange(len(X))
    train = starts + L + H <= n_train
    test = starts + L >= n_train
    return SplitWindows(X[train], Y[train], X[test], Y[test], n_train)


def train(series: Sequence[float], config: LSTMConfig | None = None) -> ForecastModel:
    config = config or LSTMConfig()
    config.validate()
    values = np.asarray(series, dtype=float)
    need = config.lookback + config.horizon
    if len(values) < need:
        raise SeriesTooShort(f"{len(values)} days < lookback + horizon = {need}")
    n_train = max(need, int(round(config.train_ratio * len(values))))
    train_part = values[:n_train]
    scaler = MinMaxScaler(float(train_part.min()), float(train_part.max()))
    if scaler.degenerate:
        logger.warning("training series is constant (%g); scaling to zeros", scaler.min)
    split = chronological_windows(scaler.scale(values), config)
    if len(split.X_train) == 0:
        split.X_train, split.Y_train = sliding_windows(scaler.scale(train_part), config.lookback, config.horizon)

    params = init_params(config.hidden_size, 1, config.horizon, config.seed)
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(split.X_train)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            _, grads = bptt_gradients(params, split.X_train[idx], split.Y_train[idx])
            opt.step(params, grads)
        losses.append(mse_loss(params, split.X_train, split.Y_train))
    history = {"train_loss": losses[-1] if losses else mse_loss(params, split.X_train, split.Y_train)}
    if len(split.X_test):
        history["test_loss"] = mse_loss(params, split.X_test, split.Y_test)
    reference = (float(train_part.mean()), float(train_part.std()))
    return ForecastModel(params, scaler, config, reference, history)


@dataclass
class Forecast:
    values: np.ndarray
    flags: list[bool]


def forecast(model: ForecastModel, recent: Sequence[float], z_threshold: float = 3.0) -> Forecast:
    """Next ``horizon`` raw values from the last ``lookback`` raw values.

    A day is flagged when its forecast lies more than ``z_threshold`` training
    standard deviations from the training mean.
    """
    recent = np.asarray(recent, dtype=float)
    if recent.ndim != 1 or len(recent) != model.config.lookback:
        raise BadWindowLength(f"expected {model.config.lookback} values, got {recent.shape}")
    pred = model.scaler.unscale(forward_sequence(model, model.scaler.scale(recent)))
    pred = np.maximum(pred, 0.0)
    mean, std = model.reference
    flags = [bool(std > 0 and abs(v - mean) / std > z_threshold) for v in pred]
    return Forecast(pred, flags)


def persistence_forecast(window: np.ndarray, horizon: int) -> np.ndarray:
    window = np.atleast_2d(window)
    return np.repeat(window[:, -1:], horizon, axis=1)


def daily_series(instances: Iterable, activity: str, metric: str = "duration",
                 first_day: date | None = None, last_day: date | None = None) -> tuple[list[date], np.ndarray]:
    """Per-day total duration (seconds) or instance count of one activity; missing days are 0."""
    if metric not in ("duration", "frequency"):
        raise ValueError("metric must be 'duration' or 'frequency'")
    inst = [i for i in instances if i.activity == activity]
    all_days = [i.day for i in inst]
    if first_day is None:
        first_day = min(all_days) if all_days else None
    if last_day is None:
        last_day = max(all_days) if all_days else None
    if first_day is None or last_day is None:
        return [], np.zeros(0)
    days = [first_day + timedelta(days=k) for k in range((last_day - first_day).days + 1)]
    pos = {d: k for k, d in enumerate(days)}
    values = np.zeros(len(days))
    for i in inst:
        k = pos.get(i.day)
        if k is not None:
            values[k] += i.duration_s if metric == "duration" else 1.0
    return days, values


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": " ".join(f"{v:.17g}" for v in a.ravel())}


def _decode(d: dict) -> np.ndarray:
    data = np.array([float(v) for v in d["data"].split()], dtype=float)
    return data.reshape(d["shape"])


def dumps_model(model: ForecastModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "scaler": {"min": f"{model.scaler.min:.17g}", "max": f"{model.scaler.max:.17g}"},
        "reference": [f"{v:.17g}" for v in model.reference],
        "params": {k: _encode(model.params[k]) for k in PARAM_NAMES},
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def loads_model(text: str) -> ForecastModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"forecast model is not valid JSON: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFileError("not a forecast model document")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFileError(f"forecast model version {doc.get('version')!r} unsupported")
    try:
        config = LSTMConfig(**doc["config"])
        params = {k: _decode(doc["params"][k]) for k in PARAM_NAMES}
        scaler = MinMaxScaler(float(doc["scaler"]["min"]), float(doc["scaler"]["max"]))
        reference = tuple(float(v) for v in doc["reference"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed forecast model: {exc}") from exc
    return ForecastModel(params, scaler, config, reference)


def save_model(model: ForecastModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> ForecastModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
