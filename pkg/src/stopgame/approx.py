"""Smooth approximations of the game data used by the penalized problems.

The pieces are the gradient penalty psi_eps, the cut-off xi_m, the lower
boundary zeta, clamped payoffs g^N, h^N, mollified coefficients, the
state-dependent cost alpha^N_m and the compatibility-fixed payoff.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import AssumptionViolation, ConsistencyError, ParameterError
from .model import ConstantsLedger, GameModel, smallest_root, theta_bar


# quintic smoothstep and its antiderivative/derivatives on [0, 1]

def _S(s):
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _S1(s):
    return 30.0 * s**2 * (1.0 - s) ** 2


def _S2(s):
    return 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)


def _S_int(s):
    return s**4 * (2.5 - 3.0 * s + s**2)


@dataclass(frozen=True)
class PenalizationParams:
    N: float
    kappa: float
    eps: float
    delta: float
    m: float

    def __post_init__(self):
        if not self.N > 2:
            raise ParameterError("N must exceed 2")
        for name in ("kappa", "eps", "delta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1), got {v}")
        if not self.m > 1:
            raise ParameterError("m must exceed 1")

    def to_dict(self):
        return {"N": self.N, "kappa": self.kappa, "eps": self.eps,
                "delta": self.delta, "m": self.m}


# penalty ---------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothPenalty:
    """C^2 convex penalty: 0 below 0, (y - eps)/eps above 2 eps.

    On [0, 2 eps] the bridge is P(y / 2 eps) with P(s) = 2 s^3 - s^4, the
    unique polynomial of degree <= 5 matching value, slope and curvature at
    both knots (its quintic coefficient vanishes).
    """
    eps: float

    def psi(self, y):
        y = np.asarray(y, float)
        s = np.clip(y / (2.0 * self.eps), 0.0, 1.0)
        bridge = s**3 * (2.0 - s)
        return np.where(y >= 2.0 * self.eps, (y - self.eps) / self.eps, bridge)

    def psi_prime(self, y):
        y = np.asarray(y, float)
        s = np.clip(y / (2.0 * self.eps), 0.0, 1.0)
        return (6.0 * s**2 - 4.0 * s**3) / (2.0 * self.eps)

    def psi_second(self, y):
        y = np.asarray(y, float)
        s = np.clip(y / (2.0 * self.eps), 0.0, 1.0)
        inside = (y > 0.0) & (y < 2.0 * self.eps)
        return np.where(inside, 12.0 * s * (1.0 - s) / (4.0 * self.eps**2), 0.0)


def psi_eval(penalty: SmoothPenalty, y):
    return penalty.psi(y)


def psi_prime(penalty: SmoothPenalty, y):
    return penalty.psi_prime(y)


# cut-off and boundary curve --------------------------------------------------

@dataclass(frozen=True)
class CutoffProfile:
    """xi_m = 1 on [0, m], (1-s)^3 (6 s^2 + 3 s + 1) at m + s, 0 beyond m + 1."""
    m: float

    def __call__(self, x):
        x = np.asarray(x, float)
        s = np.clip(x - self.m, 0.0, 1.0)
        return 1.0 - _S(s), -_S1(s), np.where((x > self.m) & (x < self.m + 1), -_S2(s), 0.0)

    def value(self, x):
        return 1.0 - _S(np.clip(np.asarray(x, float) - self.m, 0.0, 1.0))


def cutoff_eval(profile: CutoffProfile, x):
    return profile(x)


def _fit_C0(n: int = 200001) -> float:
    s = np.linspace(0.0, 1.0, n)[:-1]
    xi = 1.0 - _S(s)
    ratio = _S1(s) ** 2 / xi
    return float(max(ratio.max(), np.abs(_S2(s)).max()))


C0 = _fit_C0()


@dataclass(frozen=True)
class BoundaryCurve:
    """zeta(t): 0 up to T - 1/m, then a quintic ramp up to theta_bar_Nk at T."""
    m: float
    T: float
    theta_bar_Nk: float

    @property
    def t_start(self):
        return self.T - 1.0 / self.m

    def __call__(self, t):
        t = np.asarray(t, float)
        tau = np.clip((t - self.t_start) * self.m, 0.0, 1.0)
        z = self.theta_bar_Nk * _S(tau)
        dz = self.theta_bar_Nk * self.m * _S1(tau)
        return z, dz

    def value(self, t):
        return self(t)[0]


# truncation ------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothClamp:
    """s_N(v) = N chi(v / N): identity up to N - 1, C^2, saturating at N."""
    N: float

    @property
    def knot(self):
        return 1.0 - 1.0 / self.N

    @property
    def width(self):
        return 2.0 / self.N

    def __call__(self, v):
        v = np.asarray(v, float)
        z = v / self.N
        tau = np.clip((z - self.knot) / self.width, 0.0, 1.0)
        bend = self.N * (self.knot + self.width * (tau - _S_int(tau)))
        return np.where(z <= self.knot, v, bend)

    def d1(self, v):
        tau = np.clip((np.asarray(v, float) / self.N - self.knot) / self.width, 0.0, 1.0)
        return 1.0 - _S(tau)

    def d2(self, v):
        tau = np.clip((np.asarray(v, float) / self.N - self.knot) / self.width, 0.0, 1.0)
        return -_S1(tau) / (self.width * self.N)


@dataclass
class TruncatedPayoffs:
    model: GameModel
    N: float
    clamp: SmoothClamp
    alpha_bar_N: float
    L_N: float

    def g(self, t, x):
        return self.clamp(self.model.g(t, x))

    def h(self, t, x):
        return self.clamp(self.model.h(t, x))

    def g_t(self, t, x):
        return self.clamp.d1(self.model.g(t, x)) * self.model.dg_dt(t, x)

    def g_x(self, t, x):
        return self.clamp.d1(self.model.g(t, x)) * self.model.dg_dx(t, x)

    def g_xx(self, t, x):
        gv = self.model.g(t, x)
        gx = self.model.dg_dx(t, x)
        return self.clamp.d2(gv) * gx**2 + self.clamp.d1(gv) * self.model.d2g_dxx(t, x)

    def h_x(self, t, x):
        return self.clamp.d1(self.model.h(t, x)) * self.model.dh_dx(t, x)


def truncate_payoffs(model: GameModel, N: float, x_scan: float | None = None) -> TruncatedPayoffs:
    model = model.with_fd_derivatives()
    try:
        tb = theta_bar(model)
    except AssumptionViolation:
        tb = None
    if tb is not None:
        xs = np.linspace(0.0, tb + 1.0, 201)
        ts = np.full_like(xs, model.T)
        if tb + 1.0 > N - 1 or np.max(model.g(ts, xs)) > N - 1 or np.max(model.h(ts, xs)) > N - 1:
            raise ParameterError(f"N = {N} too small: payoffs on [0, theta_bar + 1] exceed N - 1")
    clamp = SmoothClamp(N)
    x_scan = x_scan or float(N)
    tt, xx = np.meshgrid(np.linspace(0, model.T, 41), np.linspace(0, x_scan, 4001), indexing="ij")
    hx = clamp.d1(model.h(tt, xx)) * model.dh_dx(tt, xx)
    hv = clamp(model.h(tt, xx))
    lt = np.max(np.abs(np.diff(hv, axis=0))) / (model.T / 40)
    L_N = float(max(np.max(np.abs(hx)), lt))
    return TruncatedPayoffs(model, N, clamp, model.alpha_bar + 1.0 / (2.0 * N), L_N)


# mollification ---------------------------------------------------------------

@dataclass(frozen=True)
class MollifiedCoefficients:
    model: GameModel
    kappa: float

    def mu_k(self, x):
        x = np.maximum(np.asarray(x, float), 0.0)
        return np.clip(self.model.mu(x), -1.0 / self.kappa, 1.0 / self.kappa)

    def sigma_k(self, x):
        x = np.maximum(np.asarray(x, float), 0.0)
        return np.clip(self.model.sigma(x) + self.kappa, self.kappa, 1.0 / self.kappa)


def mollify_coefficients(model: GameModel, kappa: float) -> MollifiedCoefficients:
    if not 0.0 < kappa < 1.0:
        raise ParameterError("kappa must lie in (0, 1)")
    return MollifiedCoefficients(model, kappa)


# the assembled approximation -------------------------------------------------

@dataclass
class ApproxBundle:
    model: GameModel
    params: PenalizationParams
    penalty: SmoothPenalty
    trunc: TruncatedPayoffs
    coef: MollifiedCoefficients
    xi_m: CutoffProfile
    xi_m1: CutoffProfile
    theta_bar: float
    theta_bar_Nk: float
    zeta: BoundaryCurve
    ledger: ConstantsLedger = field(default_factory=ConstantsLedger)

    # localized payoffs g^N_m = xi_{m-1} g^N, h^N_m = xi_{m-1} h^N
    def gNm(self, t, x):
        return self.xi_m1.value(x) * self.trunc.g(t, x)

    def hNm(self, t, x):
        return self.xi_m1.value(x) * self.trunc.h(t, x)

    def gNm_derivs(self, t, x):
        """(g, g_t, g_x, g_xx) of g^N_m."""
        xi, dxi, ddxi = self.xi_m1(x)
        tr = self.trunc
        g, gt, gx, gxx = tr.g(t, x), tr.g_t(t, x), tr.g_x(t, x), tr.g_xx(t, x)
        return (xi * g, xi * gt, dxi * g + xi * gx, ddxi * g + 2 * dxi * gx + xi * gxx)

    def generator(self, t, x, derivs):
        """(d_t + L_kappa - r) applied to a function given its derivatives."""
        v, vt, vx, vxx = derivs
        s = self.coef.sigma_k(x)
        return vt + 0.5 * s * s * vxx + self.coef.mu_k(x) * vx - self.model.r * v

    def theta_Nkm(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return self.generator(t, x, self.gNm_derivs(t, x)) + self.hNm(t, x)

    def theta_Nk(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        tr = self.trunc
        d = (tr.g(t, x), tr.g_t(t, x), tr.g_x(t, x), tr.g_xx(t, x))
        return self.generator(t, x, d) + tr.h(t, x)

    def alpha(self, t, x):
        """State-dependent cost alpha^N_m(t, x)."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        aN = self.trunc.alpha_bar_N
        xi, dxi, _ = self.xi_m(x)
        N = self.params.N
        rad = aN**2 + N**2 * dxi**2 + 2.0 * self.trunc.g(t, x) * xi * dxi * self.trunc.g_x(t, x)
        if np.any(rad < -1e-12):
            raise ConsistencyError("negative radicand in alpha^N_m")
        return np.sqrt(np.maximum(rad, 0.0))

    @property
    def Lambda_N(self) -> float:
        aN, N = self.trunc.alpha_bar_N, self.params.N
        return float(np.sqrt(aN**2 + N**2 * C0 + 2.0 * N * np.sqrt(C0) * aN))

    def to_dict(self):
        return {"params": self.params.to_dict(), "theta_bar": self.theta_bar,
                "theta_bar_Nk": self.theta_bar_Nk, "alpha_bar_N": self.trunc.alpha_bar_N,
                "Lambda_N": self.Lambda_N, "C0": C0, "L_N": self.trunc.L_N}


def alpha_field(bundle: ApproxBundle, t, x):
    return bundle.alpha(t, x)


def theta_Nkm(bundle: ApproxBundle, t, x):
    return bundle.theta_Nkm(t, x)


def theta_bar_Nk(bundle: ApproxBundle) -> float:
    return bundle.theta_bar_Nk


def _root_theta_Nk(model, trunc, coef, x_max):
    tmp = ApproxBundle.__new__(ApproxBundle)
    tmp.model, tmp.trunc, tmp.coef = model, trunc, coef
    f = lambda xs: ApproxBundle.theta_Nk(tmp, np.full_like(xs, model.T), xs)
    if not f(np.array([0.0]))[0] < 0:
        raise AssumptionViolation("Theta^N_kappa(T, 0) is not negative",
                                  failed=["Theta(T,0) negative"])
    return smallest_root(f, x_max, 801, what="Theta^N_kappa(T, .)")


def assemble(model: GameModel, params: PenalizationParams, grid_n: int = 201) -> ApproxBundle:
    """Build every approximation object for one parameter tuple."""
    model = model.with_fd_derivatives()
    tb = theta_bar(model)
    trunc = truncate_payoffs(model, params.N)
    coef = mollify_coefficients(model, params.kappa)
    tbk = _root_theta_Nk(model, trunc, coef, max(10.0, 4.0 * tb))
    if not tbk < tb + 1.0:
        raise ParameterError(f"kappa = {params.kappa} above kappa_0: theta_bar_Nk = {tbk:.4g} "
                             f">= theta_bar + 1 = {tb + 1:.4g}")
    if not tbk < params.m - 1.0:
        raise ParameterError(f"m = {params.m} too small: need m - 1 > theta_bar_Nk = {tbk:.4g}")
    b = ApproxBundle(model, params, SmoothPenalty(params.eps), trunc, coef,
                     CutoffProfile(params.m), CutoffProfile(params.m - 1.0), tb, tbk,
                     BoundaryCurve(params.m, model.T, tbk))
    led = b.ledger
    led.set("C0", C0, "fitted")
    led.set("Lambda_N", b.Lambda_N, "declared")
    led.set("L_N", trunc.L_N, "fitted")
    ts = np.linspace(0.0, model.T, grid_n)
    xs = np.linspace(0.0, params.m + 1.0, 4 * grid_n)
    TT, XX = np.meshgrid(ts, xs, indexing="ij")
    led.set("C_Theta", float(np.max(np.abs(b.theta_Nkm(TT, XX)))), "fitted")
    a2 = b.alpha(TT, XX) ** 2
    led.set("L_alpha2", float(np.max(np.abs(np.diff(a2, axis=1))) / (xs[1] - xs[0])), "fitted")
    return b


# compatibility fix -----------------------------------------------------------

@dataclass
class CompatiblePayoff:
    """g~ = f(t) phi(x) xi_{m-1}(x) with phi = (x - theta_bar_Nk)^2 + c."""
    bundle: ApproxBundle
    c: float
    modified: bool = True

    @property
    def _tb(self):
        return self.bundle.theta_bar_Nk

    def phi(self, x):
        x = np.asarray(x, float)
        return (x - self._tb) ** 2 + self.c, 2.0 * (x - self._tb), np.full_like(x, 2.0)

    def f(self, t):
        b = self.bundle
        t = np.asarray(t, float)
        z, dz = b.zeta(t)
        G, Gt, Gx, _ = b.gNm_derivs(t, z)
        ph, dph, _ = self.phi(z)
        xi, dxi, _ = b.xi_m1(z)
        Phi = ph * xi
        dG = Gt + Gx * dz
        dPhi = (dph * xi + ph * dxi) * dz
        return G / Phi, (dG * Phi - G * dPhi) / Phi**2

    def derivs(self, t, x):
        """(g~, g~_t, g~_x, g~_xx)."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if not self.modified:
            return self.bundle.gNm_derivs(t, x)
        f, df = self.f(t)
        ph, dph, ddph = self.phi(x)
        xi, dxi, ddxi = self.bundle.xi_m1(x)
        return (f * ph * xi, df * ph * xi, f * (dph * xi + ph * dxi),
                f * (ddph * xi + 2 * dph * dxi + ph * ddxi))

    def __call__(self, t, x):
        return self.derivs(t, x)[0]

    def theta(self, t, x):
        """(d_t + L_kappa - r) g~ + h^N_m."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return self.bundle.generator(t, x, self.derivs(t, x)) + self.bundle.hNm(t, x)

    def conditions(self, n_t: int = 20):
        """Residuals of the three compatibility requirements."""
        b = self.bundle
        T, m, tb = b.model.T, b.params.m, self._tb
        ts = np.linspace(0.0, T, n_t)
        z = b.zeta.value(ts)
        match = 0.0
        for y in (z, np.full_like(ts, m)):
            ref = b.gNm(ts, y)
            match = max(match, float(np.max(np.abs(self(ts, y) - ref) / np.maximum(np.abs(ref), 1e-300))
                                     if np.any(ref != 0) else np.max(np.abs(self(ts, y)))))
        ys = np.array([tb, m])
        Ts = np.full(2, T)
        grad = np.abs(self.derivs(Ts, ys)[2])
        gen = self.theta(Ts, ys)
        return {"boundary_match_rel": match, "grad_at_theta_bar": float(grad[0]),
                "grad_at_m": float(grad[1]), "generator_at_theta_bar": float(gen[0]),
                "generator_at_m": float(gen[1])}


def compatibility_fix(bundle: ApproxBundle, c_default: float = 1.0) -> CompatiblePayoff:
    T, tb = bundle.model.T, bundle.theta_bar_Nk
    g, gt, gx, gxx = (float(v) for v in bundle.gNm_derivs(T, tb))
    if gx == 0.0:
        return CompatiblePayoff(bundle, c_default, modified=False)
    if g == 0.0:
        raise ConsistencyError("g^N_m(T, theta_bar_Nk) = 0 with non-zero slope")
    _, dz = bundle.zeta(T)
    s = float(bundle.coef.sigma_k(tb))
    Lg = 0.5 * s * s * gxx + float(bundle.coef.mu_k(tb)) * gx
    rhs = Lg - gx * float(dz)
    c = c_default if rhs <= 0 else s * s * g / rhs
    return CompatiblePayoff(bundle, c, modified=True)
