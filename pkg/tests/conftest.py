import pathlib
import time

import numpy as np
import pytest

from feederdispatch.embed import DispatchProblem
from feederdispatch.io import load_feeder, load_scenario
from feederdispatch.pipeline import run
from feederdispatch.solver import SolverConfig

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "feederdispatch" / "data"
FEEDER_PATH = DATA / "ieee13_feeder.json"
SCENARIO_PATH = DATA / "ieee13_scenario.json"

# tolerance used for the shipped-scenario regression runs (same as the CLI default)
IEEE13_TOL = 1e-8


def random_voltages(rng, n, v0=None):
    v = (1.0 + 0.05 * rng.standard_normal(n)) * np.exp(1j * 0.1 * rng.standard_normal(n))
    if v0 is not None:
        v[:3] = v0
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ieee13():
    model = load_feeder(FEEDER_PATH)
    return model, load_scenario(SCENARIO_PATH, model)


@pytest.fixture(scope="session")
def ieee13_pf_timed(ieee13):
    """Shipped scenario with the PCC power-factor limit, plus its wall time in seconds."""
    model, scenario = ieee13
    t0 = time.perf_counter()
    r = run(model, scenario, DispatchProblem(pcc_pf=True), SolverConfig(tol=IEEE13_TOL))
    return r, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ieee13_pf_run(ieee13_pf_timed):
    return ieee13_pf_timed[0]


@pytest.fixture(scope="session")
def ieee13_plain_run(ieee13):
    model, scenario = ieee13
    return run(model, scenario, DispatchProblem(), SolverConfig(tol=IEEE13_TOL))
