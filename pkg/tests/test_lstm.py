import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import helpers
from homewatch import lstm
from homewatch.lstm import (
    BadWindowLength,
    LSTMConfig,
    LSTMState,
    MinMaxScaler,
    ModelFileError,
    SeriesTooShort,
    ShapeMismatch,
    bptt_gradients,
    cell_forward,
    chronological_windows,
    forecast,
    forward_sequence,
    init_params,
    train,
    zero_params,
)


def test_zero_parameter_cell():
    params = zero_params(1)
    state, cache = cell_forward(params, np.array([0.7]), LSTMState(np.zeros(1), np.array([2.0])))
    for gate in ("f", "i", "o"):
        assert cache[gate][0] == 0.5
    assert cache["g"][0] == 0.0
    assert state.c[0] == 1.0
    assert state.h[0] == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert state.h[0] == pytest.approx(0.380797, abs=1e-6)


def test_saturated_gates_keep_memory():
    params = zero_params(3)
    params["b_f"][:] = 50.0
    params["b_i"][:] = -50.0
    params["W_cx"][:] = 1.0
    prev = LSTMState(np.zeros(3), np.array([0.3, -1.2, 2.5]))
    state, _ = cell_forward(params, np.array([4.0]), prev)
    np.testing.assert_allclose(state.c, prev.c, atol=1e-12)


def test_cell_is_pure():
    params = init_params(5, seed=3)
    prev = LSTMState(np.full(5, 0.1), np.full(5, -0.4))
    a, _ = cell_forward(params, np.array([0.2]), prev)
    b, _ = cell_forward(params, np.array([0.2]), prev)
    assert a.h.tobytes() == b.h.tobytes() and a.c.tobytes() == b.c.tobytes()


def test_cell_shape_mismatch():
    params = init_params(4)
    with pytest.raises(ShapeMismatch):
        cell_forward(params, np.array([0.1, 0.2]), LSTMState(np.zeros(4), np.zeros(4)))
    with pytest.raises(ShapeMismatch):
        cell_forward(params, np.array([0.1]), LSTMState(np.zeros(3), np.zeros(3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(-20, 20), st.floats(-5, 5))
def test_state_bounds(seed, x, c0):
    params = init_params(4, seed=seed)
    for k in params:
        params[k] *= 4
    prev = LSTMState(np.tanh(np.full(4, c0)), np.full(4, c0))
    state, _ = cell_forward(params, np.array([x]), prev)
    assert (np.abs(state.h) < 1).all()
    assert (np.abs(state.c) <= np.abs(prev.c) + 1).all()


def _model(params, lookback=21):
    cfg = LSTMConfig(hidden_size=params["W_fh"].shape[0], lookback=lookback)
    return lstm.ForecastModel(params, MinMaxScaler(0.0, 1.0), cfg)


def test_zero_model_outputs_head_bias():
    params = zero_params(3)
    params["b_y"][:] = np.arange(7) / 10
    rng = np.random.default_rng(0)
    for _ in range(3):
        np.testing.assert_array_equal(forward_sequence(_model(params), rng.normal(size=21)), np.arange(7) / 10)


def test_output_shape_and_window_length():
    m = _model(init_params(6, seed=1))
    assert forward_sequence(m, np.zeros(21)).shape == (7,)
    with pytest.raises(BadWindowLength):
        forward_sequence(m, np.zeros(20))
    with pytest.raises(BadWindowLength):
        forecast(m, np.zeros(22))


def test_gradient_check():
    worst = helpers.finite_difference_errors(hidden=4, lookback=5)
    assert set(worst) == set(lstm.PARAM_NAMES)
    assert max(worst.values()) <= 1e-4, worst


def test_zero_error_batch_has_zero_gradients():
    params = init_params(4, seed=2)
    X = np.random.default_rng(1).normal(size=(5, 21))
    y = _model(params).predict_scaled(X)
    loss, grads = bptt_gradients(params, X, y)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_duplicate_batch_keeps_mean_gradient():
    params = init_params(4, seed=2)
    rng = np.random.default_rng(2)
    X, Y = rng.normal(size=(4, 10)), rng.normal(size=(4, 7))
    l1, g1 = bptt_gradients(params, X, Y)
    l2, g2 = bptt_gradients(params, np.vstack([X, X]), np.vstack([Y, Y]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-15)


def test_non_finite_loss():
    params = init_params(2)
    with pytest.raises(lstm.NonFiniteLoss):
        bptt_gradients(params, np.zeros((1, 3)), np.full((1, 7), np.inf))


def test_scaler_round_trip_and_degenerate():
    s = MinMaxScaler(3.0, 11.0)
    x = np.linspace(3, 11, 17)
    np.testing.assert_allclose(s.unscale(s.scale(x)), x, atol=1e-9)
    d = MinMaxScaler(5.0, 5.0)
    assert d.degenerate and not d.scale(np.array([5.0, 5.0])).any()
    np.testing.assert_array_equal(d.unscale(np.array([0.3])), [5.0])


def test_split_has_no_leakage():
    values = np.arange(100.0)
    split = chronological_windows(values, LSTMConfig())
    assert split.n_train_days == 80
    assert split.X_train.size and (split.Y_train.max() < 80) and (split.X_train.max() < 80)
    assert (split.Y_test.min(axis=1) >= 80).all()


def test_series_too_short():
    with pytest.raises(SeriesTooShort):
        train(np.ones(27), LSTMConfig(epochs=1))


def test_constant_series(caplog):
    model = train(np.full(60, 7.5), LSTMConfig(hidden_size=4, epochs=30))
    assert "constant" in caplog.text
    np.testing.assert_allclose(forecast(model, np.full(21, 7.5)).values, 7.5)


def test_constant_nonzero_series_is_learned():
    values = np.r_[np.zeros(1), np.full(79, 4.0)]  # min 0, max 4: scaled constant 1.0
    model = train(values, LSTMConfig(hidden_size=8, epochs=400, seed=1))
    assert model.history["train_loss"] < 1e-4
    np.testing.assert_allclose(forecast(model, np.full(21, 4.0)).values, 4.0, atol=0.05)


def test_training_is_deterministic():
    values = helpers.sine_series(60)
    cfg = LSTMConfig(hidden_size=5, epochs=5, seed=4)
    assert lstm.dumps_model(train(values, cfg)) == lstm.dumps_model(train(values, cfg))
    assert lstm.dumps_model(train(values, cfg)) != lstm.dumps_model(train(values, LSTMConfig(hidden_size=5, epochs=5, seed=5)))


def test_forecast_clipped_and_flagged():
    params = zero_params(2)
    params["b_y"][:] = [-3.0, 0.5, 0.5, 0.5, 0.5, 0.5, 9.0]
    model = _model(params)
    model.reference = (0.5, 0.1)
    out = forecast(model, np.zeros(21), z_threshold=3.0)
    assert out.values[0] == 0.0 and (out.values >= 0).all()
    assert out.flags == [True, False, False, False, False, False, True]


def test_model_file_round_trip(tmp_path):
    model = train(helpers.sine_series(60), LSTMConfig(hidden_size=4, epochs=3))
    path = tmp_path / "f.json"
    lstm.save_model(model, path)
    back = lstm.load_model(path)
    x = helpers.sine_series(21)
    assert forecast(back, x).values.tobytes() == forecast(model, x).values.tobytes()
    assert lstm.dumps_model(back) == path.read_text()
    with pytest.raises(ModelFileError):
        lstm.loads_model(path.read_text()[:50])


def test_daily_series_fills_gaps():
    from datetime import datetime
    from homewatch.analytics import ActivityInstance
    inst = [ActivityInstance("A", datetime(2009, 1, 1, 9), datetime(2009, 1, 1, 10)),
            ActivityInstance("A", datetime(2009, 1, 3, 9), datetime(2009, 1, 3, 9, 30)),
            ActivityInstance("A", datetime(2009, 1, 3, 20), datetime(2009, 1, 3, 20, 30)),
            ActivityInstance("B", datetime(2009, 1, 2, 9), datetime(2009, 1, 2, 10))]
    days, dur = lstm.daily_series(inst, "A")
    assert len(days) == 3 and dur.tolist() == [3600.0, 0.0, 3600.0]
    assert lstm.daily_series(inst, "A", "frequency")[1].tolist() == [1.0, 0.0, 2.0]


# --- trained sine model (shared with the acceptance suite) ---------------------------

def test_sine_beats_persistence(sine_model, sine_values):
    bench = helpers.sine_benchmark(sine_model, sine_values)
    assert bench["windows"] > 0
    assert bench["model_mse"] < bench["persistence_mse"]


def test_sine_phase_tracking(sine_model, sine_values):
    recent, truth = sine_values[-28:-7], sine_values[-7:]
    pred = forecast(sine_model, recent).values
    pred_steps = np.diff(np.r_[recent[-1], pred])
    true_steps = np.diff(np.r_[recent[-1], truth])
    assert np.sum(np.sign(pred_steps) == np.sign(true_steps)) >= 5
