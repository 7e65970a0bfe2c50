import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from stopgame.approx import (C0, BoundaryCurve, CutoffProfile, PenalizationParams, SmoothPenalty,
                             alpha_field, assemble, compatibility_fix, cutoff_eval,
                             mollify_coefficients, psi_eval, psi_prime, theta_Nkm, truncate_payoffs)
from stopgame.errors import ParameterError
from stopgame.model import theta_bar


# penalty ---------------------------------------------------------------------

def test_psi_examples():
    p = SmoothPenalty(0.1)
    assert psi_eval(p, 0.3) == pytest.approx(2.0, abs=1e-14)
    for eps in (0.01, 0.1, 0.5):
        assert psi_eval(SmoothPenalty(eps), -5.0) == 0.0


def test_psi_bridge_value_against_integrated_second_derivative():
    eps = 0.1
    p = SmoothPenalty(eps)
    # psi(y) = int_0^y int_0^s psi''(u) du ds = int_0^y (y - u) psi''(u) du
    oracle, _ = quad(lambda u: (0.15 - u) * float(p.psi_second(u)), 0.0, 0.15, epsabs=1e-14)
    assert float(p.psi(0.15)) == pytest.approx(oracle, abs=1e-12)
    assert float(p.psi(0.15)) == pytest.approx(0.52734375, abs=1e-14)


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
def test_psi_knot_continuity(eps):
    p = SmoothPenalty(eps)
    h = 1e-9 * eps
    for y0 in (0.0, 2 * eps):
        assert abs(p.psi(y0 + h) - p.psi(y0 - h)) <= 1e-8
        assert abs(p.psi_prime(y0 + h) - p.psi_prime(y0 - h)) <= 1e-7 / eps
        assert abs(p.psi_second(y0 + h) - p.psi_second(y0 - h)) <= 1e-6 / eps**2


@settings(max_examples=60, deadline=None)
@given(eps=st.floats(0.01, 0.9), y=st.floats(-5, 5))
def test_psi_properties(eps, y):
    p = SmoothPenalty(eps)
    assert p.psi(y) >= 0
    assert psi_prime(p, y) >= 0
    if y >= 2 * eps:
        assert float(p.psi(y)) == pytest.approx((y - eps) / eps, rel=1e-12, abs=1e-12)
        assert float(p.psi_prime(y)) == pytest.approx(1 / eps, rel=1e-12)
    if y <= 0:
        assert p.psi(y) == 0.0


def test_psi_convex_on_grid():
    p = SmoothPenalty(0.05)
    y = np.linspace(-0.5, 0.5, 20001)
    v = p.psi(y)
    assert np.min(v[2:] - 2 * v[1:-1] + v[:-2]) >= -1e-10


# cut-off and boundary ------------------------------------------------------

def test_cutoff_examples():
    xi = CutoffProfile(8.0)
    assert tuple(map(float, cutoff_eval(xi, 4.0))) == (1.0, 0.0, 0.0)
    assert tuple(map(float, cutoff_eval(xi, 10.0))) == (0.0, 0.0, 0.0)


def test_cutoff_matches_quintic_complement():
    xi = CutoffProfile(3.0)
    s = np.linspace(0, 1, 101)
    assert np.allclose(xi.value(3.0 + s), (1 - s) ** 3 * (6 * s**2 + 3 * s + 1), atol=1e-14)


def test_cutoff_C0_bound():
    xi = CutoffProfile(5.0)
    x = np.linspace(5.0, 6.0, 100001)[:-1]
    v, d1, d2 = xi(x)
    assert np.all(v >= 0) and np.all(v <= 1)
    assert np.max(d1**2 / v) <= C0 * (1 + 1e-9)
    assert np.max(np.abs(d2)) <= C0


def test_boundary_curve():
    z = BoundaryCurve(m=8.0, T=1.0, theta_bar_Nk=0.78)
    t = np.linspace(0, 1, 2001)
    v, dv = z(t)
    assert np.all(v[t <= 1 - 1 / 8] == 0.0)
    assert float(v[-1]) == pytest.approx(0.78, abs=1e-15)
    assert np.all(np.diff(v) >= 0)
    assert np.all(dv >= 0)


# truncation and mollification ----------------------------------------------

def test_truncation_identity_region(gbm):
    tr = truncate_payoffs(gbm, 100)
    x = np.linspace(0, 25, 501)
    for t in (0.0, 1.0):
        assert np.array_equal(tr.h(t, x), gbm.h(t, x))
        assert np.array_equal(tr.g(t, x), gbm.g(t, x))


def test_truncation_bounds_and_monotone(gbm):
    tr = truncate_payoffs(gbm, 100)
    x = np.linspace(0, 200, 20001)
    g, h = tr.g(0.5, x), tr.h(0.5, x)
    assert np.all(g >= 0) and np.all(g <= gbm.g(0.5, x) + 1e-12)
    assert np.all(h >= 0) and np.all(h <= gbm.h(0.5, x) + 1e-12)
    assert np.all(np.diff(g) >= -1e-12) and np.all(np.diff(h) >= -1e-12)
    assert np.max(g) <= 100 and np.max(h) <= 100
    assert np.max(np.abs(tr.g_x(0.5, x))) <= tr.alpha_bar_N
    assert 0 <= tr.alpha_bar_N - gbm.alpha_bar <= 1 / 100


def test_truncation_rejects_small_N(gbm):
    with pytest.raises(ParameterError):
        truncate_payoffs(gbm, 2.5)


def test_mollified_coefficients(gbm):
    c = mollify_coefficients(gbm, 0.01)
    assert float(c.sigma_k(1.0)) == pytest.approx(0.21, abs=1e-15)
    assert float(c.sigma_k(0.0)) == pytest.approx(0.01)
    x = np.linspace(0, 500, 5001)
    assert np.all(np.abs(c.mu_k(x)) <= 100) and np.all(c.sigma_k(x) >= 0.01)
    assert np.all(c.sigma_k(x) <= 100)
    inside = x <= 100
    assert np.array_equal(c.mu_k(x[inside]), gbm.mu(x[inside]))


def test_mollification_converges(gbm):
    x = np.linspace(0, 4, 401)
    errs = [np.max(np.abs(mollify_coefficients(gbm, k).sigma_k(x) - gbm.sigma(x)))
            for k in (0.1, 0.05, 0.01)]
    assert errs[0] > errs[1] > errs[2]


# bundle ----------------------------------------------------------------------

def test_alpha_field(bundle):
    aN = bundle.trunc.alpha_bar_N
    x_in = np.linspace(0, 8, 81)
    assert np.allclose(alpha_field(bundle, 0.3, x_in), aN, atol=1e-14)
    x = np.linspace(8.0, 9.0, 2001)
    xi, dxi, _ = bundle.xi_m(x)
    prod = np.abs(dxi * bundle.trunc.g(0.3, x) + xi * bundle.trunc.g_x(0.3, x))
    a = alpha_field(bundle, 0.3, x)
    assert np.all(a >= prod - 1e-12)
    TT, XX = np.meshgrid(np.linspace(0, 1, 21), np.linspace(0, 10, 2001), indexing="ij")
    assert np.max(alpha_field(bundle, TT, XX)) <= bundle.Lambda_N


def test_alpha_squared_lipschitz(bundle):
    x = np.linspace(0, 10, 40001)
    a2 = alpha_field(bundle, 0.5, x) ** 2
    slope = np.max(np.abs(np.diff(a2))) / (x[1] - x[0])
    assert slope <= 1.05 * bundle.ledger.get("L_alpha2")


def test_localized_payoffs_vanish(bundle):
    x = np.linspace(8, 12, 41)
    assert np.all(bundle.gNm(0.5, x) == 0) and np.all(bundle.hNm(0.5, x) == 0)


def test_theta_Nkm_inside_equals_mollified_theta(bundle, gbm):
    x = np.linspace(0, 6.5, 131)
    for t in (0.0, 0.7):
        s = gbm.sigma(x) + 0.05
        ref = 0.1 * x**2 + 0.5 * gbm.mu(x) - 0.05 * (1 + 0.5 * x) + 0.0 * s
        assert np.allclose(theta_Nkm(bundle, t, x), ref, atol=1e-13)


def test_theta_bar_Nk_close_to_theta_bar(gbm):
    b = assemble(gbm, PenalizationParams(1000, 0.01, 0.1, 0.01, 12))
    assert abs(b.theta_bar_Nk - theta_bar(gbm)) <= 0.05


def test_C_theta_bounds_scan(bundle):
    TT, XX = np.meshgrid(np.linspace(0, 1, 57), np.linspace(0, 9, 733), indexing="ij")
    assert np.max(np.abs(theta_Nkm(bundle, TT, XX))) <= bundle.ledger.get("C_Theta") * (1 + 1e-9)


def test_params_validation():
    with pytest.raises(ParameterError):
        PenalizationParams(100, 1.5, 0.1, 0.01, 8)
    with pytest.raises(ParameterError):
        PenalizationParams(2, 0.1, 0.1, 0.01, 8)


def test_m_too_small_rejected(gbm):
    with pytest.raises(ParameterError):
        assemble(gbm, PenalizationParams(100, 0.05, 0.1, 0.01, 1.5))


# compatibility ---------------------------------------------------------------

def test_compatibility_phi(bundle):
    fix = compatibility_fix(bundle)
    assert float(fix.phi(bundle.theta_bar_Nk)[0]) == pytest.approx(fix.c, abs=1e-15)


def test_compatibility_c_rule(bundle):
    fix = compatibility_fix(bundle)
    assert fix.modified and fix.c > 0
    # frozen from an independent evaluation of sigma^2 g / (L g - g_x zeta')
    tb = bundle.theta_bar_Nk
    s = 0.2 * tb + 0.05
    g, gx = 1 + 0.5 * tb, 0.5
    expected = s * s * g / (0.02 * tb * gx - gx * 0.0)
    assert fix.c == pytest.approx(expected, rel=1e-10)


def test_compatibility_unmodified_when_flat(gbm):
    flat = dataclasses.replace(gbm, g=lambda t, x: 1.0 + 0.0 * x * t,
                               dg_dx=lambda t, x: 0.0 * x * t)
    b = assemble(flat, PenalizationParams(100, 0.05, 0.1, 0.01, 8))
    fix = compatibility_fix(b)
    assert not fix.modified
    x = np.linspace(0, 9, 19)
    assert np.array_equal(fix(0.5, x), b.gNm(0.5, x))
