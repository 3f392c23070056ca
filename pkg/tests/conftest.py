import time
from pathlib import Path
from typing import NamedTuple

import pytest

import helpers
from homewatch import lstm

# acceptance verdict lines, printed at the end of the run
CRITERIA: dict[int, str] = {}


class SineTraining(NamedTuple):
    model: lstm.ForecastModel
    seconds: float


class PipelineRuns(NamedTuple):
    a: Path
    b: Path
    seconds: float  # wall time of the first run


@pytest.fixture(scope="session")
def sine_values():
    return helpers.sine_series()


@pytest.fixture(scope="session")
def sine_training(sine_values):
    # full default configuration: hidden 32, 500 epochs, Adam 1e-3, minibatch 32
    t0 = time.perf_counter()
    model = lstm.train(sine_values, lstm.LSTMConfig(seed=0))
    return SineTraining(model, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def sine_model(sine_training):
    return sine_training.model


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Two independent CLI pipeline runs with identical inputs."""
    root = tmp_path_factory.mktemp("pipeline")
    t0 = time.perf_counter()
    a = helpers.run_cli_pipeline(root / "a")
    seconds = time.perf_counter() - t0
    return PipelineRuns(a, helpers.run_cli_pipeline(root / "b"), seconds)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
