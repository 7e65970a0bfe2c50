import time

import numpy as np
import pytest

from stopgame.approx import PenalizationParams, assemble
from stopgame.continuation import default_schedule, finalize, run_schedule
from stopgame.model import builtin_model
from stopgame.pde import Mesh, solve_penalized

DEFAULT_STAGE = PenalizationParams(N=100, kappa=0.05, eps=0.1, delta=0.01, m=8)


@pytest.fixture(scope="session")
def gbm():
    return builtin_model("gbm-quad")


@pytest.fixture(scope="session")
def bundle(gbm):
    return assemble(gbm, DEFAULT_STAGE)


@pytest.fixture(scope="session")
def stage_field(bundle):
    t0 = time.perf_counter()
    u = solve_penalized(bundle, Mesh.for_bundle(bundle, 400, 320))
    u.meta["wall"] = time.perf_counter() - t0
    return u


@pytest.fixture(scope="session")
def converged(gbm):
    """Default four-stage schedule, finalized (regions, VI report)."""
    t0 = time.perf_counter()
    sol = run_schedule(gbm, default_schedule())
    finalize(sol)
    sol.diagnostics["wall"] = time.perf_counter() - t0
    return sol


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
