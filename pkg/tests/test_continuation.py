import numpy as np
import pytest

import stopgame.continuation as cont
from stopgame.approx import PenalizationParams as P
from stopgame.continuation import (ACTION, INACTION, STOP, LimitSchedule, Monitor, Stage,
                                   default_schedule, extract_regions, maximality_probe,
                                   modulus_constant, run_schedule, stage_difference,
                                   stop_sections_attached, verify_variational_inequality)
from stopgame.errors import ConfigurationError, NonConvergenceError
from stopgame.model import GameModel, RegimeFlags, validate_assumptions
from stopgame.pde import Mesh, ScalarField, solve_penalized


def a1_model():
    """Bounded coefficients, sigma away from zero, bounded smooth payoffs."""
    th = lambda x: np.tanh(np.asarray(x, float))
    sech2 = lambda x: 1.0 / np.cosh(np.minimum(np.asarray(x, float), 300.0)) ** 2
    return GameModel(
        mu=lambda x: 0.0 * np.asarray(x, float), sigma=lambda x: 0.3 + 0.0 * np.asarray(x, float),
        r=0.05, alpha_bar=1.0, T=1.0,
        g=lambda t, x: 1.0 + 0.5 * th(x) + 0.0 * t, h=lambda t, x: 0.2 * th(x) ** 2 + 0.0 * t,
        dg_dt=lambda t, x: 0.0 * x * t, dg_dx=lambda t, x: 0.5 * sech2(x) + 0.0 * t,
        d2g_dxx=lambda t, x: -th(x) * sech2(x) + 0.0 * t,
        dh_dx=lambda t, x: 0.4 * th(x) * sech2(x) + 0.0 * t, name="a1-tanh")


def flat_model():
    c = lambda t, x: 1.0 + 0.0 * np.asarray(x, float) * np.asarray(t, float)
    z = lambda t, x: 0.0 * np.asarray(x, float) * np.asarray(t, float)
    return GameModel(mu=lambda x: 0.02 * np.asarray(x, float), sigma=lambda x: 0.2 * np.asarray(x, float),
                     r=0.05, alpha_bar=1.0, T=1.0, g=c, h=z, dg_dt=z, dg_dx=z, d2g_dxx=z, dh_dx=z)


# schedule mechanics ---------------------------------------------------------------

def test_schedule_invariants():
    a, b = P(100, 0.05, 0.1, 0.01, 8), P(100, 0.05, 0.1, 0.02, 8)
    with pytest.raises(ConfigurationError):
        LimitSchedule([Stage(a), Stage(b)])
    with pytest.raises(ConfigurationError):
        LimitSchedule([Stage(P(100, 0.05, 0.1, 0.01, 16)), Stage(a)])
    with pytest.raises(ConfigurationError):
        LimitSchedule([])
    sched = default_schedule()
    assert [s.n_x + 1 for s in sched.stages] == [321, 1169, 2025, 2025]


def test_single_stage_is_the_solve(gbm, bundle):
    stage = Stage(bundle.params, 100, 80)
    sol = run_schedule(gbm, LimitSchedule([stage]))
    direct = solve_penalized(bundle, Mesh.for_bundle(bundle, 100, 80))
    assert np.array_equal(sol.v.values, direct.values)
    assert sol.history == [] and sol.diagnostics["converged"]


def test_default_schedule_converges(converged):
    h = converged.history
    assert len(h) == 3
    assert all(b < a for a, b in zip(h[:-1], h[1:]))
    assert converged.final_difference <= converged.schedule.stage_tol
    assert converged.diagnostics["strictly_decreasing"]
    for key in ("K3", "C_Theta", "Lambda_N"):
        assert key in converged.ledger


def test_nonconvergence_reported(gbm, monkeypatch):
    monkeypatch.setattr(cont, "stage_difference", lambda a, b, m: 0.1)
    stages = [Stage(P(100, 0.05, e, 0.01, 8), 20, 32) for e in (0.4, 0.3, 0.2, 0.1)]
    with pytest.raises(NonConvergenceError) as ei:
        run_schedule(gbm, LimitSchedule(stages))
    assert ei.value.history == [0.1, 0.1, 0.1]


def test_a1_identity_approximations_superfluous():
    model = a1_model()
    assert validate_assumptions(model, RegimeFlags("A1")).ok
    full = run_schedule(model, LimitSchedule([Stage(P(100, 0.05, 0.1, 0.01, 8), 200, 160),
                                              Stage(P(100, 0.01, 0.1, 0.01, 8), 200, 160),
                                              Stage(P(400, 0.01, 0.1, 0.01, 8), 200, 160)]))
    skip = run_schedule(model, LimitSchedule([Stage(P(1e6, 1e-4, 0.1, 0.01, 8), 200, 160)]))
    assert stage_difference(full.v, skip.v, Monitor()) <= full.schedule.stage_tol


# VI verification -------------------------------------------------------------------

def test_converged_passes_all_lines(converged):
    rep = converged.vi_report
    assert rep.ok, {k: v["rate"] for k, v in rep.lines.items()}
    assert len(rep.lines) == 7
    assert rep.growth_constant <= converged.ledger.get("K3")


def test_fault_injection_detected(converged):
    v = converged.v.copy()
    T, X = np.meshgrid(v.t, v.x, indexing="ij")
    patch = (T >= 0.2) & (T <= 0.5) & (X >= 1.5) & (X <= 3.0)
    v.values[patch] += 0.1
    tols = converged.diagnostics["tolerances"]
    region = cont.verification_region(v, converged.schedule.monitor)
    rep = verify_variational_inequality(v, converged.model, tols, region)
    assert not rep.ok
    assert not (rep.lines["equation"]["ok"] and rep.lines["inaction subsolution"]["ok"])


def test_fully_stopped_degenerate_instance():
    model = flat_model()
    mesh = Mesh.uniform(1.0, 4.0, 50, 40)
    T, X = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    v = ScalarField(mesh, model.g(T, X))
    rep = verify_variational_inequality(v, model, {"tol_eq": 1e-6, "tol_grad": 0.02,
                                                   "tol_obstacle": 1e-8})
    assert rep.ok
    assert rep.lines["equation"]["applicable"] == 0
    assert rep.lines["continuation supersolution"]["applicable"] == 0
    assert rep.lines["obstacle"]["applicable"] == v.values.size


# regions --------------------------------------------------------------------------

def test_region_labels(converged):
    lab = converged.regions
    assert set(np.unique(lab)) <= {STOP, INACTION, ACTION}
    assert np.all(lab[-1] == STOP) and np.all(lab[:, 0] == STOP)
    assert (lab == INACTION).any()
    assert converged.diagnostics["stop_sections_attached"] == 1.0
    kinds = {b[2] for b in converged.boundaries}
    assert "stop" in kinds


def test_stop_sections_helper():
    lab = np.array([[STOP, STOP, INACTION, INACTION],
                    [STOP, INACTION, STOP, INACTION],
                    [STOP] * 4])
    assert stop_sections_attached(lab) == 0.5


def test_extract_regions_on_payoff_is_all_stop(gbm):
    mesh = Mesh.uniform(1.0, 4.0, 10, 20)
    T, X = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    lab, _ = extract_regions(ScalarField(mesh, gbm.g(T, X)), gbm, 0.02, 1e-6)
    assert np.all(lab == STOP)


# limits ---------------------------------------------------------------------------

def test_value_within_growth_envelope(converged):
    v = converged.v
    assert v.values.min() >= -1e-8
    assert np.all(v.values <= converged.ledger.get("K3") * (1 + v.x**2))


def test_maximality_probe_small(gbm, bundle):
    sol = run_schedule(gbm, LimitSchedule([Stage(bundle.params, 100, 80)]))
    probe = maximality_probe(sol)
    assert probe["params"]["delta"] == pytest.approx(1e-3)
    assert probe["ok"], probe["max_excess"]


def test_modulus_constant_on_linear_field():
    mesh = Mesh.uniform(1.0, 4.0, 4, 40)
    T, X = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    c = modulus_constant(ScalarField(mesh, X.copy()), Monitor(1.0, 0.0, 4.0))
    # |x1 - x2|^(7/8) peaks at eta = 1 inside the allowed range
    assert c == pytest.approx(1.0, abs=1e-12)
