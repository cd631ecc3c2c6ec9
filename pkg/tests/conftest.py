from pathlib import Path

import numpy as np
import pytest

from kmsig.gridsim import NetworkModel
from kmsig.scenario import execute, load_config

DATA = Path(__file__).parent / "data"

_RESULTS = []


def toy_network(agc_gain=1.0, damping=(0.5, 0.5)):
    """Two machines, M = 1, one line b = 5, half a p.u. of load on each."""
    return NetworkModel(
        n_gen=2, n_load=0,
        susceptance=[[0.0, 5.0], [5.0, 0.0]],
        inertia=[1.0, 1.0], damping=list(damping),
        agc_gain=agc_gain, agc_participation=[0.5, 0.5],
        base_load=[0.5, 0.5], name="toy",
    )


@pytest.fixture
def toy():
    return toy_network()


@pytest.fixture(scope="session")
def step_run():
    return execute(load_config("step_attack"))


@pytest.fixture(scope="session")
def event_run():
    return execute(load_config("event_only"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def report(capsys):
    """Print one criterion line straight to the terminal and keep it for the summary."""
    def emit(line):
        _RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
