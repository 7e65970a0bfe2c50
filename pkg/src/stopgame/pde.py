"""Finite-difference solvers for the penalized and linear parabolic problems.

All problems are backward in time with Dirichlet data on the parabolic
boundary.  Space stencils are three-point on a possibly non-uniform grid;
the node next to a curved lower boundary uses a Shortley-Weller stencil
whose left arm ends on the boundary itself.

Example:
    >>> from stopgame.model import builtin_model
    >>> from stopgame.approx import assemble, PenalizationParams
    >>> from stopgame.pde import Mesh, solve_penalized
    >>> b = assemble(builtin_model("gbm-quad"), PenalizationParams(100, 0.05, 0.1, 0.01, 8))
    >>> u = solve_penalized(b, Mesh.for_bundle(b, 100, 160))
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .approx import ApproxBundle, BoundaryCurve, CompatiblePayoff, SmoothPenalty
from .errors import ConfigurationError, NumericalError

SCHEMES = ("implicit-euler", "crank-nicolson")


@dataclass
class Mesh:
    t_nodes: np.ndarray
    x_nodes: np.ndarray
    boundary_curve: Optional[BoundaryCurve] = None

    def __post_init__(self):
        self.t_nodes = np.asarray(self.t_nodes, float)
        self.x_nodes = np.asarray(self.x_nodes, float)
        if self.t_nodes.ndim != 1 or self.x_nodes.ndim != 1:
            raise ConfigurationError("mesh nodes must be one-dimensional")
        if self.t_nodes.size < 2:
            raise ConfigurationError("need at least two time nodes")
        if self.x_nodes.size < 5:
            raise ConfigurationError("need at least 3 interior space nodes")
        if np.any(np.diff(self.t_nodes) <= 0) or np.any(np.diff(self.x_nodes) <= 0):
            raise ConfigurationError("mesh nodes must be strictly increasing")
        if self.x_nodes[0] != 0.0 or self.t_nodes[0] != 0.0:
            raise ConfigurationError("mesh must start at t = 0 and x = 0")

    @classmethod
    def uniform(cls, T, x_max, n_t, n_x, boundary_curve=None):
        """n_t time steps and n_x space cells."""
        if int(n_t) < 1 or int(n_x) < 4:
            raise ConfigurationError(f"mesh too small: n_t={n_t}, n_x={n_x}")
        return cls(np.linspace(0.0, T, int(n_t) + 1), np.linspace(0.0, x_max, int(n_x) + 1),
                   boundary_curve)

    @classmethod
    def for_bundle(cls, bundle: ApproxBundle, n_t=400, n_x=320):
        return cls.uniform(bundle.model.T, bundle.params.m, n_t, n_x, bundle.zeta)

    @property
    def T(self):
        return float(self.t_nodes[-1])

    @property
    def shape(self):
        return self.t_nodes.size, self.x_nodes.size

    def to_dict(self):
        return {"n_t": int(self.t_nodes.size - 1), "n_x": int(self.x_nodes.size - 1),
                "T": self.T, "x_max": float(self.x_nodes[-1]),
                "uniform": bool(np.allclose(np.diff(self.x_nodes), self.x_nodes[1] - self.x_nodes[0]))}


@dataclass
class SolverOptions:
    scheme: str = "implicit-euler"
    nonlinear_tol: float = 1e-9
    max_picard_iters: int = 60
    upwind_drift: bool = True
    rannacher_startup_steps: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if not self.nonlinear_tol > 0:
            raise ConfigurationError("nonlinear_tol must be positive")
        if self.max_picard_iters < 1:
            raise ConfigurationError("max_picard_iters must be >= 1")

    @property
    def theta(self):
        return 1.0 if self.scheme == "implicit-euler" else 0.5


@dataclass
class ScalarField:
    mesh: Mesh
    values: np.ndarray
    active: Optional[np.ndarray] = None  # True where the equation was solved
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if self.values.shape != self.mesh.shape:
            raise ConfigurationError("field shape does not match mesh")
        if self.active is None:
            self.active = np.zeros(self.values.shape, bool)
            self.active[:-1, 1:-1] = True

    @property
    def t(self):
        return self.mesh.t_nodes

    @property
    def x(self):
        return self.mesh.x_nodes

    def dx(self):
        """Central first difference (one-sided at the ends)."""
        return np.gradient(self.values, self.x, axis=1, edge_order=1)

    def dxx(self):
        u, x = self.values, self.x
        out = np.zeros_like(u)
        hl, hr = np.diff(x)[:-1], np.diff(x)[1:]
        out[:, 1:-1] = 2.0 * ((u[:, 2:] - u[:, 1:-1]) / hr - (u[:, 1:-1] - u[:, :-2]) / hl) / (hl + hr)
        out[:, 0], out[:, -1] = out[:, 1], out[:, -2]
        return out

    def dt(self):
        """One-sided difference towards T, the direction of the implicit step."""
        u, t = self.values, self.t
        out = np.empty_like(u)
        out[:-1] = (u[1:] - u[:-1]) / np.diff(t)[:, None]
        out[-1] = out[-2]
        return out

    def interp(self, t, x):
        """Bilinear interpolation at scattered points (clamped to the mesh)."""
        return _bilinear(self.t, self.x, self.values, t, x)

    def copy(self, values=None):
        return ScalarField(self.mesh, self.values.copy() if values is None else values,
                           self.active.copy(), dict(self.meta))


def _bilinear(tg, xg, V, t, x):
    t = np.clip(np.asarray(t, float), tg[0], tg[-1])
    x = np.clip(np.asarray(x, float), xg[0], xg[-1])
    i = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, tg.size - 2)
    j = np.clip(np.searchsorted(xg, x, side="right") - 1, 0, xg.size - 2)
    a = (t - tg[i]) / (tg[i + 1] - tg[i])
    b = (x - xg[j]) / (xg[j + 1] - xg[j])
    return ((1 - a) * ((1 - b) * V[i, j] + b * V[i, j + 1])
            + a * ((1 - b) * V[i + 1, j] + b * V[i + 1, j + 1]))


# problem description -----------------------------------------------------------

@dataclass
class ParabolicProblem:
    """u_t + sigma^2/2 u_xx + mu u_x + k u + source
           + (1/delta)(obstacle - u)^+ - psi_eps(u_x^2 - cost^2) = 0
    on {lower(t) < x < x_upper}, u = data on the parabolic boundary."""
    sigma: Callable
    mu: Callable
    reaction: Callable          # (t, x) -> k
    source: Callable            # (t, x)
    data: Callable              # (t, x) Dirichlet data, also used on masked nodes
    lower: Callable = lambda t: 0.0
    x_upper: Optional[float] = None
    obstacle: Optional[Callable] = None
    delta: float = 1.0
    cost: Optional[Callable] = None
    eps: float = 1.0


class _Slice:
    """Stencil of one time level: unknown node range and arm lengths."""

    def __init__(self, x, zeta, iu):
        dx_loc = np.diff(x)
        lo = int(np.searchsorted(x, zeta, side="right"))
        lo = max(lo, 1)
        # a node hugging the boundary is treated as a boundary node
        while lo < iu and x[lo] - zeta < 1e-3 * dx_loc[min(lo, dx_loc.size - 1)]:
            lo += 1
        self.lo, self.iu = lo, iu
        self.idx = np.arange(lo, iu)
        if self.idx.size == 0:
            return
        xl = x[self.idx - 1].copy()
        xl[0] = max(zeta, x[lo - 1])
        self.xl0 = xl[0]
        self.hl = x[self.idx] - xl
        self.hr = x[self.idx + 1] - x[self.idx]


class _Engine:
    def __init__(self, prob: ParabolicProblem, mesh: Mesh, options: SolverOptions):
        self.p, self.mesh, self.opt = prob, mesh, options
        x = mesh.x_nodes
        if prob.x_upper is None:
            self.iu = x.size - 1
        else:
            if x[-1] < prob.x_upper - 1e-12:
                raise ConfigurationError(f"mesh ends at {x[-1]} below the domain edge {prob.x_upper}")
            self.iu = int(np.searchsorted(x, prob.x_upper - 1e-9 * (1 + prob.x_upper)))
        if self.iu < 4:
            raise ConfigurationError("fewer than 3 interior nodes inside the domain")
        self.D = 0.5 * np.asarray(prob.sigma(x), float) ** 2 * np.ones_like(x)
        self.M = np.asarray(prob.mu(x), float) * np.ones_like(x)
        self.pen = SmoothPenalty(prob.eps) if prob.cost is not None else None
        self._slices = {}

    def slice(self, t):
        z = float(self.p.lower(t))
        key = round(z, 15)
        s = self._slices.get(key)
        if s is None:
            s = _Slice(self.mesh.x_nodes, z, self.iu)
            s.zeta = z
            self._slices[key] = s
        return s

    def linear_coeffs(self, s):
        """(l, c, r) coefficients of sigma^2/2 D2 + mu D1 on the unknown nodes."""
        i, hl, hr = s.idx, s.hl, s.hr
        D, M = self.D[i], self.M[i]
        sm = hl + hr
        l = 2 * D / (hl * sm)
        r = 2 * D / (hr * sm)
        c = -(l + r)
        pe = np.abs(M) * np.maximum(hl, hr) / np.maximum(D, 1e-300)
        up = pe > 2.0 if self.opt.upwind_drift else np.zeros_like(pe, bool)
        cen = ~up
        l = l + np.where(cen, -M * hr / (hl * sm), np.where(M < 0, -M / hl, 0.0))
        r = r + np.where(cen, M * hl / (hr * sm), np.where(M > 0, M / hr, 0.0))
        c = c + np.where(cen, M * (hr - hl) / (hl * hr), np.where(M > 0, -M / hr, M / hl))
        return l, c, r

    def neighbours(self, u, s, t):
        """Values left and right of the unknown nodes, with boundary data on the ends."""
        i = s.idx
        ul = u[i - 1].copy()
        ul[0] = float(self.p.data(t, s.xl0)) if s.xl0 > self.mesh.x_nodes[s.lo - 1] else u[s.lo - 1]
        return ul, u[i + 1]

    def grad_terms(self, u, s, t, ul, ur):
        """Godunov selection for -psi(u_x^2 - a^2); returns (use_left, p0, y0, H0)."""
        i = s.idx
        dm = (u[i] - ul) / s.hl
        dp = (ur - u[i]) / s.hr
        a = np.asarray(self.p.cost(t, self.mesh.x_nodes[i]), float)
        pen = self.pen
        pm, pp = np.minimum(dp, 0.0), np.maximum(dm, 0.0)
        fm, fp = pen.psi(pm * pm - a * a), pen.psi(pp * pp - a * a)
        left = fp >= fm
        p0 = np.where(left, pp, pm)
        z = p0 * p0 - a * a
        y0 = 2.0 * p0 * pen.psi_prime(z)
        return left, p0, y0, y0 * p0 - np.maximum(fp, fm), np.maximum(fp, fm)

    def apply(self, u, s, t):
        """Full nonlinear spatial operator F(u) on the unknown nodes.

        The linear part is written in difference form so constants are
        annihilated exactly.
        """
        x = self.mesh.x_nodes
        i = s.idx
        l, _, r = self.linear_coeffs(s)
        ul, ur = self.neighbours(u, s, t)
        xi = x[i]
        tt = np.full(xi.shape, t)
        out = l * (ul - u[i]) + r * (ur - u[i])
        out += self.p.reaction(tt, xi) * u[i] + self.p.source(tt, xi)
        if self.p.obstacle is not None:
            out += np.maximum(self.p.obstacle(tt, xi) - u[i], 0.0) / self.p.delta
        if self.p.cost is not None:
            out -= self.grad_terms(u, s, t, ul, ur)[4]
        return out

    def fill(self, u, s, t):
        x = self.mesh.x_nodes
        outside = np.ones(x.size, bool)
        outside[s.idx] = False
        u[outside] = self.p.data(np.full(outside.sum(), t), x[outside])
        return u

    def step(self, u_next, t_next, t_now, theta):
        """One theta-step from t_next back to t_now.

        Picard iteration with the nonlinear terms lagged through their
        tangent at the current iterate, solved for the increment.
        """
        x = self.mesh.x_nodes
        dt = t_next - t_now
        s = self.slice(t_now)
        u = self.fill(u_next.copy(), s, t_now)
        if s.idx.size == 0:
            return u, 0
        i = s.idx
        xi = x[i]
        tt = np.full(xi.shape, t_now)
        explicit = 0.0
        if theta < 1.0:
            explicit = (1.0 - theta) * self.apply(self.fill(u_next.copy(), s, t_next), s, t_next)
        l0, c0, r0 = self.linear_coeffs(s)
        k = self.p.reaction(tt, xi) * np.ones_like(xi)
        obst = self.p.obstacle(tt, xi) if self.p.obstacle is not None else None
        tol = self.opt.nonlinear_tol
        prev_change = np.inf
        damp = 1.0
        linear = obst is None and self.p.cost is None
        for it in range(1, self.opt.max_picard_iters + 1):
            l, c, r = l0.copy(), c0 + k, r0.copy()
            if obst is not None:
                c = c - (obst > u[i]) / self.p.delta
            if self.p.cost is not None:
                ul, ur = self.neighbours(u, s, t_now)
                left, _, y0, _, _ = self.grad_terms(u, s, t_now, ul, ur)
                w = np.where(left, y0 / s.hl, 0.0)
                l = l + w
                c = c - w
                w = np.where(left, 0.0, -y0 / s.hr)
                r = r + w
                c = c - w
            G = (u_next[i] - u[i]) / dt + theta * self.apply(u, s, t_now) + explicit
            ab = np.empty((3, i.size))
            ab[0, 0] = 0.0
            ab[0, 1:] = -theta * r[:-1]
            ab[1] = 1.0 / dt - theta * c
            ab[2, -1] = 0.0
            ab[2, :-1] = -theta * l[1:]
            delta_u = solve_banded((1, 1), ab, G, check_finite=False)
            if not np.all(np.isfinite(delta_u)):
                raise NumericalError(f"non-finite iterate at t = {t_now:.6g}")
            change = np.max(np.abs(delta_u))
            if change > prev_change:
                damp = 0.5
            u[i] = u[i] + damp * delta_u
            if linear or change <= tol * (1.0 + np.max(np.abs(u[i]))):
                return u, it
            prev_change = change
        raise NumericalError(f"Picard iteration did not converge at t = {t_now:.6g} "
                             f"(last change {change:.3e})")

    def solve(self):
        t = self.mesh.t_nodes
        x = self.mesh.x_nodes
        U = np.empty((t.size, x.size))
        U[-1] = self.p.data(np.full(x.size, t[-1]), x)
        active = np.zeros(U.shape, bool)
        iters = []
        theta = self.opt.theta
        for n in range(t.size - 2, -1, -1):
            k_from_T = t.size - 2 - n
            if theta < 1.0 and k_from_T < self.opt.rannacher_startup_steps:
                mid = 0.5 * (t[n] + t[n + 1])
                half, it1 = self.step(U[n + 1], t[n + 1], mid, 1.0)
                U[n], it2 = self.step(half, mid, t[n], 1.0)
                iters.append(it1 + it2)
            else:
                U[n], it = self.step(U[n + 1], t[n + 1], t[n], theta)
                iters.append(it)
            active[n, self.slice(t[n]).idx] = True
        return U, active, iters

    def residual(self, U):
        t = self.mesh.t_nodes
        th = self.opt.theta
        R = np.zeros_like(U)
        for n in range(t.size - 1):
            s = self.slice(t[n])
            if s.idx.size == 0:
                continue
            R[n, s.idx] = (U[n + 1, s.idx] - U[n, s.idx]) / (t[n + 1] - t[n]) + th * self.apply(U[n], s, t[n])
            if th < 1.0:
                R[n, s.idx] += (1.0 - th) * self.apply(self.fill(U[n + 1].copy(), s, t[n + 1]), s, t[n + 1])
        return R


# problem builders ------------------------------------------------------------

def penalized_problem(bundle: ApproxBundle, data=None) -> ParabolicProblem:
    b = bundle
    r = b.model.r
    return ParabolicProblem(
        sigma=b.coef.sigma_k, mu=b.coef.mu_k,
        reaction=lambda t, x: -r + 0.0 * x,
        source=b.hNm, data=data or b.gNm,
        lower=lambda t: float(b.zeta.value(t)), x_upper=b.params.m,
        obstacle=b.gNm, delta=b.params.delta, cost=b.alpha, eps=b.params.eps)


def unbounded_problem(bundle: ApproxBundle, x_max: float) -> ParabolicProblem:
    b = bundle
    r = b.model.r
    aN = b.trunc.alpha_bar_N
    return ParabolicProblem(
        sigma=b.coef.sigma_k, mu=b.coef.mu_k,
        reaction=lambda t, x: -r + 0.0 * x,
        source=b.trunc.h, data=b.trunc.g, lower=lambda t: 0.0, x_upper=x_max,
        obstacle=b.trunc.g, delta=b.params.delta,
        cost=lambda t, x: aN + 0.0 * np.asarray(x, float), eps=b.params.eps)


def solve_problem(problem: ParabolicProblem, mesh: Mesh,
                  options: SolverOptions | None = None) -> ScalarField:
    """Generic entry point for a hand-built problem."""
    eng = _Engine(problem, mesh, options or SolverOptions())
    U, active, iters = eng.solve()
    f = ScalarField(mesh, U, active)
    f.meta.update({"picard_iters_max": int(max(iters, default=0)),
                   "residual_max": float(np.max(np.abs(eng.residual(U))))})
    return f


def declared_K2(bundle: ApproxBundle, x_max: float | None = None) -> float:
    """sup of (-Theta^N_kappa)^+ on a scan grid (bounds the obstacle penalty)."""
    m = bundle.model
    x_max = x_max or max(4.0 * bundle.theta_bar, 2.0 * bundle.params.m)
    TT, XX = np.meshgrid(np.linspace(0.0, m.T, 101), np.linspace(0.0, x_max, 2001), indexing="ij")
    return float(max(np.max(-bundle.theta_Nk(TT, XX)), 0.0))


def declared_K4(bundle: ApproxBundle, x_max: float | None = None) -> float:
    """Surrogate K0 + K2 for the one-sided time-derivative bound."""
    m = bundle.model
    x_max = x_max or max(4.0 * bundle.theta_bar, 2.0 * bundle.params.m)
    TT, XX = np.meshgrid(np.linspace(0.0, m.T, 101), np.linspace(0.0, x_max, 2001), indexing="ij")
    k0 = max(float(np.max(bundle.trunc.g_t(TT, XX))),
             float(np.max(np.diff(bundle.trunc.h(TT, XX), axis=0))) / (TT[1, 0] - TT[0, 0]), 0.0)
    return k0 + declared_K2(bundle, x_max)


def declared_K3(bundle: ApproxBundle, x_max: float) -> float:
    """A priori quadratic-growth constant from the moment bound of the SDE."""
    m = bundle.model
    xs = np.linspace(0.0, x_max, 801)
    ts = np.linspace(0.0, m.T, 41)
    TT, XX = np.meshgrid(ts, xs, indexing="ij")
    k1 = max(np.max(bundle.trunc.g(TT, XX) / (1 + XX)), np.max(bundle.trunc.h(TT, XX) / (1 + XX**2)))
    d1 = np.max((np.abs(bundle.coef.mu_k(xs)) + bundle.coef.sigma_k(xs)) / (1 + xs))
    return float(2.0 * k1 * (1.0 + m.T) * np.exp((2 * d1 + d1 * d1) * m.T))


def _penalty_stats(U, active, mesh, obstacle, delta):
    TT, XX = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    P = np.where(active, np.maximum(obstacle(TT, XX) - U, 0.0) / delta, 0.0)
    return P


def solve_penalized(bundle: ApproxBundle, mesh: Mesh | None = None,
                    options: SolverOptions | None = None) -> ScalarField:
    """Penalized problem on {zeta(t) < x < m} with data g^N_m."""
    mesh = mesh or Mesh.for_bundle(bundle)
    options = options or SolverOptions()
    if mesh.boundary_curve is None:
        mesh = Mesh(mesh.t_nodes, mesh.x_nodes, bundle.zeta)
    if abs(mesh.T - bundle.model.T) > 1e-12:
        raise ConfigurationError("mesh horizon differs from the model horizon")
    eng = _Engine(penalized_problem(bundle), mesh, options)
    U, active, iters = eng.solve()
    f = ScalarField(mesh, U, active)
    P = _penalty_stats(U, active, mesh, bundle.gNm, bundle.params.delta)
    XX = np.broadcast_to(mesh.x_nodes, U.shape)
    K3 = declared_K3(bundle, mesh.x_nodes[-1])
    inner = XX <= bundle.params.m - 2.0
    f.meta.update({
        "kind": "penalized", "params": bundle.params.to_dict(),
        "picard_iters_max": int(max(iters)), "picard_iters_mean": float(np.mean(iters)),
        "min_u": float(U.min()), "K3": K3,
        "growth_ok": bool(np.all(U <= K3 * (1 + XX**2))),
        "penalty_max": float(P.max()), "penalty_max_inner": float(P[inner].max()),
        "residual_max": float(np.max(np.abs(eng.residual(U)))),
    })
    return f


def solve_penalized_unbounded(bundle: ApproxBundle, mesh: Mesh | None = None,
                              options: SolverOptions | None = None,
                              sensitivity: bool = True, n_t: int = 400,
                              dx: float | None = None) -> ScalarField:
    """Flat boundary at 0, far-field Dirichlet g^N at the end of the mesh."""
    options = options or SolverOptions()
    if mesh is None:
        x_max = max(4.0 * bundle.theta_bar, 2.0 * bundle.params.m)
        dx = dx or bundle.params.m / 320.0
        mesh = Mesh.uniform(bundle.model.T, x_max, n_t, int(round(x_max / dx)))
    x_max = float(mesh.x_nodes[-1])
    eng = _Engine(unbounded_problem(bundle, x_max), mesh, options)
    U, active, iters = eng.solve()
    f = ScalarField(mesh, U, active)
    P = _penalty_stats(U, active, mesh, bundle.trunc.g, bundle.params.delta)
    ut = f.dt()
    f.meta["K2"] = declared_K2(bundle)
    f.meta["K4"] = declared_K4(bundle)
    f.meta.update({
        "kind": "penalized-unbounded", "params": bundle.params.to_dict(), "x_max": x_max,
        "picard_iters_max": int(max(iters)), "min_u": float(U.min()),
        "penalty_max": float(P.max()), "dt_u_max": float(ut[:-1][active[:-1]].max()),
        "residual_max": float(np.max(np.abs(eng.residual(U)))),
    })
    if sensitivity:
        h = np.diff(mesh.x_nodes)
        ext = np.concatenate([mesh.x_nodes, x_max + np.cumsum(h)])
        big = Mesh(mesh.t_nodes, ext)
        U2 = _Engine(unbounded_problem(bundle, 2 * x_max), big, options).solve()[0]
        keep = mesh.x_nodes <= 0.5 * x_max
        f.meta["x_max_sensitivity"] = float(np.max(np.abs(U2[:, :mesh.x_nodes.size][:, keep] - U[:, keep])))
    return f


def residual(field: ScalarField, bundle: ApproxBundle, mesh: Mesh | None = None,
             options: SolverOptions | None = None) -> ScalarField:
    """Pointwise defect of the discrete penalized equation (zero on boundary nodes)."""
    mesh = mesh or field.mesh
    if mesh.boundary_curve is None:
        mesh = Mesh(mesh.t_nodes, mesh.x_nodes, bundle.zeta)
    eng = _Engine(penalized_problem(bundle), mesh, options or SolverOptions())
    return ScalarField(mesh, eng.residual(field.values), field.active.copy(), {"kind": "residual"})


# linear problems -------------------------------------------------------------

@dataclass
class LinearCoefficients:
    sigma: Callable
    mu: Callable
    reaction: Callable = lambda t, x: 0.0 * np.asarray(x, float)


@dataclass
class BoundaryData:
    value: Callable                       # (t, x) on the parabolic boundary
    lower: Callable = lambda t: 0.0
    x_upper: Optional[float] = None


def solve_linear_parabolic(coeffs: LinearCoefficients, source: Callable, boundary: BoundaryData,
                           mesh: Mesh, options: SolverOptions | None = None) -> ScalarField:
    """u_t + sigma^2/2 u_xx + mu u_x + k u = -source with Dirichlet data."""
    prob = ParabolicProblem(sigma=coeffs.sigma, mu=coeffs.mu, reaction=coeffs.reaction,
                            source=source, data=boundary.value, lower=boundary.lower,
                            x_upper=boundary.x_upper)
    eng = _Engine(prob, mesh, options or SolverOptions())
    U, active, _ = eng.solve()
    f = ScalarField(mesh, U, active)
    f.meta["residual_max"] = float(np.max(np.abs(eng.residual(U))))
    f._engine = eng
    return f


def solve_pi(bundle: ApproxBundle, mesh: Mesh | None = None, options=None) -> ScalarField:
    """pi_t + L_kappa pi = -(Theta^N_{kappa,m})^+ on the localized domain, zero data."""
    b = bundle
    mesh = mesh or Mesh.for_bundle(b)
    zero = lambda t, x: 0.0 * np.asarray(x, float) + 0.0 * np.asarray(t, float)
    f = solve_linear_parabolic(
        LinearCoefficients(b.coef.sigma_k, b.coef.mu_k),
        lambda t, x: np.maximum(b.theta_Nkm(t, x), 0.0),
        BoundaryData(zero, lambda t: float(b.zeta.value(t)), b.params.m), mesh, options)
    f.meta["kind"] = "pi"
    return f


def vartheta_minus(bundle: ApproxBundle, payoff: CompatiblePayoff | None = None,
                   localized: bool = True):
    """(t, x) -> theta^- built from Theta (or Theta~ when a fixed payoff is given).

    With localized=False the truncated payoff g^N is used instead of g^N_m,
    which removes the steep cut-off layer below x = m.
    """
    b = bundle
    p = b.params
    k2 = p.eps * p.kappa**2
    eRT = np.exp(b.model.r * b.model.T)

    def f(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if not localized:
            th = b.theta_Nk(t, x)
            gx = b.trunc.g_x(t, x)
        elif payoff is None:
            th = b.theta_Nkm(t, x)
            gx = b.gNm_derivs(t, x)[2]
        else:
            th = payoff.theta(t, x)
            gx = payoff.derivs(t, x)[2]
        var = eRT * (8.0 / k2) * (th - (2.0 / k2) * (gx * b.coef.sigma_k(x)) ** 2)
        return np.maximum(-var, 0.0)
    return f


@dataclass
class FlemingReport:
    psi: ScalarField
    w: ScalarField
    min_psi: float
    linear_residual: float
    hjb_residual: float
    boundary_slope: float
    theta_minus_max: float
    substeps: int

    def to_dict(self):
        d = asdict(self)
        d.pop("psi"), d.pop("w")
        return d


def _second_order_dt(V, t):
    """Three-point one-sided time derivative, second order."""
    out = np.full_like(V, np.nan)
    h1 = t[1:-1] - t[:-2]
    h2 = t[2:] - t[1:-1]
    # derivative at t[n] from t[n], t[n+1], t[n+2]
    a = -(2 * h1 + h2) / (h1 * (h1 + h2))
    b = (h1 + h2) / (h1 * h2)
    c = -h1 / (h2 * (h1 + h2))
    out[:-2] = a[:, None] * V[:-2] + b[:, None] * V[1:-1] + c[:, None] * V[2:]
    return out


def fleming_gradient_diagnostic(bundle: ApproxBundle, mesh: Mesh | None = None,
                                options: SolverOptions | None = None,
                                payoff: CompatiblePayoff | None = None,
                                theta_minus: Callable | None = None) -> FlemingReport:
    """Solve the linear problem for Psi and report the log-transform diagnostics.

    The potential 1/2 theta^- can be large; time steps are subdivided so that
    dt * max(1/2 theta^-) <= 1/2, keeping the implicit system an M-matrix.
    """
    b = bundle
    mesh = mesh or Mesh.for_bundle(b)
    options = options or SolverOptions()
    tm = theta_minus or vartheta_minus(b, payoff)
    TT, XX = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    tmax = float(np.max(tm(TT, XX)))
    dtm = float(np.max(np.diff(mesh.t_nodes)))
    sub = max(1, int(np.ceil(dtm * tmax)))
    if sub > 1:
        fine_t = np.concatenate([np.linspace(a, c, sub + 1)[:-1] for a, c in
                                 zip(mesh.t_nodes[:-1], mesh.t_nodes[1:])] + [mesh.t_nodes[-1:]])
        fmesh = Mesh(fine_t, mesh.x_nodes, mesh.boundary_curve)
    else:
        fmesh = mesh
    one = lambda t, x: 1.0 + 0.0 * np.asarray(x, float) + 0.0 * np.asarray(t, float)
    coeffs = LinearCoefficients(b.coef.sigma_k, b.coef.mu_k, lambda t, x: 0.5 * tm(t, x))
    bd = BoundaryData(one, lambda t: float(b.zeta.value(t)), b.params.m)
    psi_f = solve_linear_parabolic(coeffs, lambda t, x: 0.0 * np.asarray(x, float), bd, fmesh, options)
    P = psi_f.values[::sub]
    active = psi_f.active[::sub]
    if np.any(P <= 0) or not np.all(np.isfinite(P)):
        raise NumericalError("Psi is non-positive or overflowed; log transform undefined")
    psi = ScalarField(mesh, P, active)
    W = -2.0 * np.log(P)
    w = ScalarField(mesh, W, active)

    # residuals of the continuum equations, evaluated with second-order
    # stencils in space and time on the output mesh
    t, x = mesh.t_nodes, mesh.x_nodes
    s2 = 0.5 * b.coef.sigma_k(x) ** 2
    mu = b.coef.mu_k(x)
    th = tm(TT, XX)
    inner = active.copy()
    inner[-2:] = False
    inner[:, :1] = False
    inner[:, -1:] = False
    # keep away from the curved boundary where the output stencil crosses it
    z = b.zeta.value(t)
    inner &= XX > z[:, None] + 2 * (x[1] - x[0])
    Rl = _second_order_dt(P, t) + s2 * psi.dxx() + mu * psi.dx() + 0.5 * th * P
    Rh = _second_order_dt(W, t) + s2 * w.dxx() + mu * w.dx() - 0.25 * (b.coef.sigma_k(x) * w.dx()) ** 2 - th
    lin = float(np.max(np.abs(2.0 * Rl / P)[inner])) if inner.any() else 0.0
    hjb = float(np.max(np.abs(Rh)[inner])) if inner.any() else 0.0
    slopes = []
    for n in range(t.size - 1):
        idx = np.nonzero(active[n])[0]
        if idx.size < 2:
            continue
        lo, hi = idx[0], idx[-1]
        zl = max(float(z[n]), x[lo - 1])
        slopes.append(abs(W[n, lo]) / (x[lo] - zl))
        slopes.append(abs(W[n, hi]) / (x[hi + 1] - x[hi]))
    return FlemingReport(psi, w, float(P.min()), lin, hjb, float(max(slopes, default=0.0)),
                         tmax, sub)


# export ----------------------------------------------------------------------

def export_field(field: ScalarField, csv_path, manifest_path=None, extra: dict | None = None):
    """CSV with columns t, x, u, du_dx and an optional JSON manifest."""
    du = field.dx()
    t, x = field.t, field.x
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "u", "du_dx"])
        for n in range(t.size):
            for j in range(x.size):
                wr.writerow([repr(float(t[n])), repr(float(x[j])), repr(float(field.values[n, j])),
                             repr(float(du[n, j]))])
    if manifest_path is not None:
        doc = {"mesh": field.mesh.to_dict(), "meta": _jsonable(field.meta)}
        doc.update(extra or {})
        with open(manifest_path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
