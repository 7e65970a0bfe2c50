"""Game instances: coefficients, payoffs, standing-assumption checks.

Example:
    >>> from stopgame.model import builtin_model, theta_bar
    >>> m = builtin_model("gbm-quad")
    >>> round(theta_bar(m), 4)
    0.7861
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import AssumptionViolation, ConfigurationError

Coef = Callable[[np.ndarray], np.ndarray]
Field = Callable[[np.ndarray, np.ndarray], np.ndarray]

PROVENANCES = ("declared", "fitted", "monitored")


@dataclass(frozen=True)
class GameModel:
    mu: Coef
    sigma: Coef
    r: float
    alpha_bar: float
    T: float
    g: Field
    h: Field
    dg_dt: Optional[Field] = None
    dg_dx: Optional[Field] = None
    d2g_dxx: Optional[Field] = None
    dh_dx: Optional[Field] = None
    holder_gamma: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        if not self.alpha_bar > 0:
            raise ConfigurationError("alpha_bar must be positive")
        if self.r < 0:
            raise ConfigurationError("discount rate r must be non-negative")
        if not 0.5 < self.holder_gamma <= 1.0:
            raise ConfigurationError("holder_gamma must lie in (1/2, 1]")

    def with_fd_derivatives(self) -> "GameModel":
        """Fill missing derivative callbacks with finite differences."""
        return replace(
            self,
            dg_dt=self.dg_dt or fd_dt(self.g),
            dg_dx=self.dg_dx or fd_dx(self.g),
            d2g_dxx=self.d2g_dxx or fd_dxx(self.g),
            dh_dx=self.dh_dx or fd_dx(self.h),
        )


@dataclass(frozen=True)
class RegimeFlags:
    regime: str = "A2"
    sigma_lipschitz: bool = True

    def __post_init__(self):
        if self.regime not in ("A1", "A2"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")


@dataclass
class LedgerEntry:
    value: float
    provenance: str


@dataclass
class ConstantsLedger:
    entries: dict = field(default_factory=dict)

    def set(self, name: str, value: float, provenance: str = "fitted"):
        if provenance not in PROVENANCES:
            raise ValueError(f"bad provenance {provenance!r}")
        self.entries[name] = LedgerEntry(float(value), provenance)

    def get(self, name: str, default=None):
        e = self.entries.get(name)
        return default if e is None else e.value

    def __contains__(self, name):
        return name in self.entries

    def update(self, other: "ConstantsLedger"):
        self.entries.update(other.entries)

    def to_dict(self):
        return {k: {"value": e.value, "provenance": e.provenance}
                for k, e in sorted(self.entries.items())}


# finite-difference fallbacks ------------------------------------------------

def _step(x, rel):
    return rel * (1.0 + np.abs(x))


def fd_dx(f: Field, rel: float = 1e-5) -> Field:
    def d(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        s = _step(x, rel)
        lo = np.maximum(x - s, 0.0)
        return (f(t, x + s) - f(t, lo)) / (x + s - lo)
    return d


def fd_dxx(f: Field, rel: float = 1e-4) -> Field:
    # larger step than the first derivative: roundoff scales like 1/step^2
    def d(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        s = _step(x, rel)
        c = np.maximum(x, s)
        central = (f(t, c + s) - 2.0 * f(t, c) + f(t, c - s)) / s**2
        # second-order forward stencil where the central one would leave x >= 0
        forward = (2.0 * f(t, x) - 5.0 * f(t, x + s) + 4.0 * f(t, x + 2 * s) - f(t, x + 3 * s)) / s**2
        return np.where(x >= s, central, forward)
    return d


def fd_dt(f: Field, rel: float = 1e-5) -> Field:
    def d(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        s = _step(t, rel)
        return (f(t + s, x) - f(t - s, x)) / (2.0 * s)
    return d


# Theta ----------------------------------------------------------------------

def _require_derivatives(model: GameModel):
    missing = [n for n in ("dg_dt", "dg_dx", "d2g_dxx") if getattr(model, n) is None]
    if missing:
        raise ConfigurationError(f"missing derivative callbacks: {', '.join(missing)}")


def theta(model: GameModel, t, x):
    """h + g_t + (sigma^2/2) g_xx + mu g_x - r g."""
    _require_derivatives(model)
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    s = model.sigma(x)
    out = (model.h(t, x) + model.dg_dt(t, x) + 0.5 * s * s * model.d2g_dxx(t, x)
           + model.mu(x) * model.dg_dx(t, x) - model.r * model.g(t, x))
    return out if out.ndim else float(out)


def smallest_root(fun: Callable[[np.ndarray], np.ndarray], x_max: float, n: int = 401,
                  x_min: float = 0.0, what: str = "Theta(T, .)") -> float:
    """First sign change of fun on a uniform scan grid, refined by Brent's method."""
    xs = np.linspace(x_min, x_max, n)
    vals = np.asarray(fun(xs), float)
    if vals[0] == 0.0:
        return float(xs[0])
    idx = np.nonzero(np.sign(vals[1:]) != np.sign(vals[:-1]))[0]
    if idx.size == 0:
        raise AssumptionViolation(f"no sign change of {what} on [{x_min}, {x_max}]",
                                  failed=["theta_sign_change"])
    i = idx[0]
    a, b = xs[i], xs[i + 1]
    if vals[i + 1] == 0.0:
        return float(b)
    f1 = lambda y: float(fun(np.array([y]))[0])
    return float(brentq(f1, a, b, xtol=1e-14, rtol=1e-14, maxiter=500))


def theta_bar(model: GameModel, x_max: float = 10.0, n: int = 401) -> float:
    """Smallest positive root of x -> Theta(T, x)."""
    th0 = theta(model, model.T, 0.0)
    if not th0 < 0:
        raise AssumptionViolation(f"Theta(T,0) = {th0:.6g} is not negative",
                                  failed=["Theta(T,0) negative"])
    f = lambda xs: theta(model, np.full_like(xs, model.T), xs)
    root = smallest_root(f, x_max, n)
    if abs(theta(model, model.T, root)) > 1e-8:
        raise AssumptionViolation("root refinement failed", failed=["theta_sign_change"])
    return root


# assumption checks -----------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list
    ledger: ConstantsLedger
    theta_bar: Optional[float] = None

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failed(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "ok": self.ok,
            "theta_bar": self.theta_bar,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                       for c in self.checks],
            "constants": self.ledger.to_dict(),
        }


def validate_assumptions(model: GameModel, flags: RegimeFlags | None = None,
                         nt: int = 401, nx: int = 401,
                         x_max: float | None = None) -> ValidationReport:
    """Check the standing assumptions on a scan grid; fit the named constants."""
    flags = flags or RegimeFlags()
    m = model.with_fd_derivatives()
    checks: list[CheckResult] = []
    ledger = ConstantsLedger()
    add = lambda name, ok, detail="": checks.append(CheckResult(name, bool(ok), detail))

    tb = None
    try:
        tb = theta_bar(m)
    except AssumptionViolation:
        pass
    if x_max is None:
        x_max = max(4.0 * tb, 10.0) if tb is not None else 10.0

    ts = np.linspace(0.0, m.T, nt)
    xs = np.linspace(0.0, x_max, nx)
    TT, XX = np.meshgrid(ts, xs, indexing="ij")
    G, H = m.g(TT, XX), m.h(TT, XX)
    mu, sig = m.mu(xs), m.sigma(xs)

    # Assumption on the SDE
    add("sigma positive", np.all(sig[1:] > 0), f"min sigma = {sig[1:].min():.3g}")
    d1 = np.max((np.abs(mu) + sig) / (1.0 + xs))
    dxs = np.diff(xs)
    lip_mu = np.max(np.abs(np.diff(mu)) / dxs)
    ledger.set("D1", max(d1, lip_mu))
    add("linear growth", np.isfinite(d1) and np.isfinite(lip_mu),
        f"D1 = {max(d1, lip_mu):.4g}")
    gam = m.holder_gamma
    dg_ = np.max(np.abs(np.diff(sig)) / dxs**gam)
    ledger.set("D_gamma", dg_)
    add("sigma Holder", np.isfinite(dg_), f"D_gamma = {dg_:.4g}")

    # payoffs
    add("payoffs non-negative", np.all(G >= 0) and np.all(H >= 0),
        f"min g = {G.min():.3g}, min h = {H.min():.3g}")
    k1 = max(np.max(H / (1 + XX**2)), np.max(G / (1 + XX)))
    ledger.set("K1", k1)
    dgt = np.diff(G, axis=0) / np.diff(ts)[:, None]
    dht = np.diff(H, axis=0) / np.diff(ts)[:, None]
    k0 = max(np.max(dgt), np.max(dht), 0.0)
    ledger.set("K0", k0)
    add("time Lipschitz", np.isfinite(k0), f"K0 = {k0:.4g}")
    gx = m.dg_dx(TT, XX)
    add("gradient bound", np.max(np.abs(gx)) <= m.alpha_bar * (1 + 1e-12),
        f"max |g_x| = {np.max(np.abs(gx)):.4g}, alpha_bar = {m.alpha_bar}")

    th = theta(m, TT, XX)
    k2 = max(float(np.max(-th)), 0.0)
    ledger.set("K2", k2)
    add("Theta bounded below", np.isfinite(k2), f"K2 = {k2:.4g}")
    th_T = theta(m, np.full_like(xs, m.T), xs)
    top = xs >= 0.9 * x_max
    add("Theta(T,0) negative", th_T[0] < 0, f"Theta(T,0) = {th_T[0]:.6g}")
    add("Theta(T,x) positive at infinity", np.all(th_T[top] > 0),
        f"min = {th_T[top].min():.4g}")

    # callbacks vs finite differences
    if all(getattr(model, n) is not None for n in ("dg_dt", "dg_dx", "d2g_dxx")):
        sub = (slice(None, None, 40), slice(None, None, 40))
        tt, xx = TT[sub], XX[sub]
        worst = 0.0
        for cb, fd in ((model.dg_dt, fd_dt(model.g)), (model.dg_dx, fd_dx(model.g)),
                       (model.d2g_dxx, fd_dxx(model.g))):
            a, b = cb(tt, xx), fd(tt, xx)
            worst = max(worst, float(np.max(np.abs(a - b) / (1 + np.abs(a)))))
        add("derivative callbacks match finite differences", worst <= 1e-4,
            f"max rel diff = {worst:.2e}")

    # regime
    if flags.regime == "A2":
        mono = min(np.min(np.diff(G, axis=1)), np.min(np.diff(H, axis=1)))
        add("A2 monotone payoffs", mono >= -1e-12, f"min increment = {mono:.3g}")
    else:
        kap = min(1.0 / max(np.max(np.abs(mu)), 1e-300), float(sig.min()),
                  1.0 / max(float(sig.max()), 1e-300))
        add("A1 bounded coefficients", kap > 0, f"kappa = {kap:.3g}")
        ledger.set("kappa_A1", kap, "fitted")
    if flags.sigma_lipschitz:
        h1 = xs[1] - xs[0]
        fine = np.linspace(0.0, h1, 11)
        r_coarse = np.max(np.abs(np.diff(sig)) / dxs)
        r_fine = np.max(np.abs(np.diff(m.sigma(fine))) / np.diff(fine))
        add("sigma Lipschitz", r_fine <= 2.0 * r_coarse + 1e-12,
            f"slope ratio fine/coarse = {r_fine / max(r_coarse, 1e-300):.3g}")

    return ValidationReport(checks, ledger, tb)


# built-in models -------------------------------------------------------------

def _const(c):
    return lambda t, x: np.zeros(np.broadcast(np.asarray(t), np.asarray(x)).shape) + c


def gbm_quad(T: float = 1.0, alpha_bar: float = 1.0) -> GameModel:
    return GameModel(
        mu=lambda x: 0.02 * np.asarray(x, float),
        sigma=lambda x: 0.2 * np.maximum(np.asarray(x, float), 0.0),
        r=0.05, alpha_bar=alpha_bar, T=T,
        g=lambda t, x: 1.0 + 0.5 * x + 0.0 * t,
        h=lambda t, x: 0.1 * x**2 + 0.0 * t,
        dg_dt=_const(0.0), dg_dx=_const(0.5), d2g_dxx=_const(0.0),
        dh_dx=lambda t, x: 0.2 * x + 0.0 * t,
        holder_gamma=1.0, name="gbm-quad",
    )


def convertible_bond(T: float = 1.0, gamma: float = 0.8, c: float = 0.02,
                     k: float = 1.0) -> GameModel:
    """Callable convertible bond; Theta(T,0) = c > 0, so it sits outside the theory."""
    return GameModel(
        mu=lambda x: 0.03 * np.asarray(x, float),
        sigma=lambda x: 0.25 * np.maximum(np.asarray(x, float), 0.0),
        r=0.05, alpha_bar=k, T=T,
        g=lambda t, x: gamma * x + 0.0 * t,
        h=_const(c),
        dg_dt=_const(0.0), dg_dx=_const(gamma), d2g_dxx=_const(0.0),
        dh_dx=_const(0.0), holder_gamma=1.0, name="convertible-bond",
    )


BUILTINS = {"gbm-quad": gbm_quad, "convertible-bond": convertible_bond}
OUTSIDE_HYPOTHESES = {"convertible-bond"}


def builtin_model(name: str, **kw) -> GameModel:
    try:
        return BUILTINS[name](**kw)
    except KeyError:
        raise ConfigurationError(f"unknown built-in model {name!r}; "
                                 f"choose from {sorted(BUILTINS)}") from None
