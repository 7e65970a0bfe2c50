"""Limit schedules over penalized solves, region extraction and VI checks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .approx import ApproxBundle, PenalizationParams, assemble
from .errors import ConfigurationError, NonConvergenceError
from .model import ConstantsLedger, GameModel
from .pde import Mesh, ScalarField, SolverOptions, solve_penalized

STOP, INACTION, ACTION = 0, 1, 2
LABELS = {STOP: "STOP", INACTION: "INACTION", ACTION: "ACTION"}


@dataclass(frozen=True)
class Monitor:
    """Compact [0, t_frac*T] x [x_lo, x_hi] on which stages are compared."""
    t_frac: float = 0.9
    x_lo: float = 0.1
    x_hi: float = 4.0

    def mask(self, mesh: Mesh):
        T = mesh.T
        tm = mesh.t_nodes <= self.t_frac * T + 1e-12
        xm = (mesh.x_nodes >= self.x_lo - 1e-12) & (mesh.x_nodes <= self.x_hi + 1e-12)
        return tm[:, None] & xm[None, :]


@dataclass(frozen=True)
class Stage:
    params: PenalizationParams
    n_t: int = 400
    n_x: int = 320

    def mesh(self, bundle: ApproxBundle) -> Mesh:
        return Mesh.for_bundle(bundle, self.n_t, self.n_x)

    def to_dict(self):
        return {"params": self.params.to_dict(), "n_t": self.n_t, "n_x": self.n_x}


@dataclass
class LimitSchedule:
    stages: list
    monitor: Monitor = field(default_factory=Monitor)
    stage_tol: float = 0.02

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("schedule has no stages")
        if not self.stage_tol > 0:
            raise ConfigurationError("stage tolerance must be positive")
        for a, b in zip(self.stages[:-1], self.stages[1:]):
            p, q = a.params, b.params
            if q.m < p.m or q.N < p.N:
                raise ConfigurationError("m and N must be non-decreasing along the schedule")
            if q.delta > p.delta or q.eps > p.eps or q.kappa > p.kappa:
                raise ConfigurationError("delta, eps and kappa must be non-increasing along the schedule")

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages], "stage_tol": self.stage_tol,
                "monitor": {"t_frac": self.monitor.t_frac, "x_lo": self.monitor.x_lo,
                            "x_hi": self.monitor.x_hi}}


def stage_mesh_size(m: float, eps: float, base_nx: int = 320, base_m: float = 8.0,
                    base_eps: float = 0.1):
    """Cells grow with the domain and like 1/sqrt(eps) as the penalty sharpens."""
    return int(round(base_nx * (m / base_m) * np.sqrt(base_eps / eps)))


def default_schedule(n_t: int = 400, base_nx: int = 320) -> LimitSchedule:
    rows = [(8, 1e-2, 1e-1, 5e-2, 100),
            (16, 1e-3, 3e-2, 5e-2, 100),
            (16, 1e-3, 1e-2, 1e-2, 100),
            (16, 1e-3, 1e-2, 1e-2, 400)]
    stages = [Stage(PenalizationParams(N, k, e, d, m), n_t, stage_mesh_size(m, e, base_nx))
              for m, d, e, k, N in rows]
    return LimitSchedule(stages)


@dataclass
class VIReport:
    lines: dict
    tolerances: dict
    growth_constant: float
    ok: bool

    def to_dict(self):
        return {"lines": self.lines, "tolerances": self.tolerances,
                "growth_constant": self.growth_constant, "ok": self.ok}


@dataclass
class ValueSolution:
    v: ScalarField
    model: GameModel
    bundle: ApproxBundle
    schedule: LimitSchedule
    history: list
    stage_fields: list
    ledger: ConstantsLedger
    regions: Optional[np.ndarray] = None
    boundaries: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def final_difference(self):
        return self.history[-1] if self.history else 0.0


def _on_mesh(field_: ScalarField, mesh: Mesh):
    if field_.mesh.shape == mesh.shape and np.array_equal(field_.t, mesh.t_nodes) \
            and np.array_equal(field_.x, mesh.x_nodes):
        return field_.values
    TT, XX = np.meshgrid(mesh.t_nodes, mesh.x_nodes, indexing="ij")
    return field_.interp(TT, XX)


def stage_difference(a: ScalarField, b: ScalarField, monitor: Monitor) -> float:
    """sup over the monitor compact of |b - a|, with a interpolated onto b's mesh."""
    mask = monitor.mask(b.mesh)
    return float(np.max(np.abs(b.values - _on_mesh(a, b.mesh))[mask]))


def run_schedule(model: GameModel, schedule: LimitSchedule,
                 options: SolverOptions | None = None, keep_fields: bool = True,
                 log=None) -> ValueSolution:
    options = options or SolverOptions()
    history, fields_, ledger = [], [], ConstantsLedger()
    prev = bundle = None
    for k, stage in enumerate(schedule.stages):
        t0 = time.perf_counter()
        bundle = assemble(model, stage.params)
        u = solve_penalized(bundle, stage.mesh(bundle), options)
        u.meta["stage"] = k
        u.meta["seconds"] = time.perf_counter() - t0
        ledger.update(bundle.ledger)
        ledger.set("K3", u.meta["K3"], "declared")
        ledger.set("penalty_max_interior", u.meta["penalty_max_inner"], "monitored")
        if prev is not None:
            history.append(stage_difference(prev, u, schedule.monitor))
            if len(history) >= 3 and history[-1] >= history[-2] >= history[-3]:
                raise NonConvergenceError(
                    f"stage differences stopped decreasing at stage {k}", history)
        if log is not None:
            log(f"stage {k}: {stage.params.to_dict()} mesh {u.mesh.shape} "
                f"{u.meta['seconds']:.1f}s diff {history[-1] if history else float('nan'):.3e}")
        if keep_fields:
            fields_.append(u)
        prev = u
    sol = ValueSolution(prev, model, bundle, schedule, history, fields_, ledger)
    sol.diagnostics["stage_differences"] = list(history)
    sol.diagnostics["converged"] = bool(not history or history[-1] <= schedule.stage_tol)
    sol.diagnostics["strictly_decreasing"] = bool(all(b < a for a, b in zip(history[:-1], history[1:])))
    return sol


# VI residual and tolerances --------------------------------------------------

def model_residual(v: ScalarField, model: GameModel):
    """(d_t + L - r) v + h with the field's finite-difference accessors."""
    TT, XX = np.meshgrid(v.t, v.x, indexing="ij")
    s = model.sigma(XX)
    return v.dt() + 0.5 * s * s * v.dxx() + model.mu(XX) * v.dx() - model.r * v.values + model.h(TT, XX)


def _coarsen(v: ScalarField) -> ScalarField:
    mesh = Mesh(v.t[::2], v.x[::2], v.mesh.boundary_curve)
    return ScalarField(mesh, v.values[::2, ::2], v.active[::2, ::2])


@dataclass
class MeshError:
    residual: float     # RMS of |R_h - R_2h| on the monitor compact
    value: float        # sup |v_h - v_2h| on the monitor compact

    def to_dict(self):
        return {"residual": self.residual, "value": self.value}


def mesh_error_estimate(solution: ValueSolution, options: SolverOptions | None = None,
                        monitor: Monitor | None = None) -> MeshError:
    """Compare against the same stage solved and differenced on the 2h mesh."""
    v, model = solution.v, solution.model
    monitor = monitor or solution.schedule.monitor
    R = model_residual(v, model)
    vc = _coarsen(v)
    Rc = model_residual(vc, model)
    mask = monitor.mask(vc.mesh)
    mask[-1] = False
    rr = float(np.sqrt(np.mean((R[::2, ::2] - Rc)[mask] ** 2)))
    stage = solution.schedule.stages[-1]
    coarse = solve_penalized(solution.bundle,
                             Mesh.uniform(model.T, v.x[-1], max(stage.n_t // 2, 1),
                                          max((v.x.size - 1) // 2, 4), solution.bundle.zeta),
                             options)
    vv = float(stage_difference(coarse, v, monitor))
    return MeshError(rr, vv)


def _tolerances(solution, mesh_err: MeshError, tol_grad=None, tol_obstacle=None, tol_eq=None):
    a = solution.model.alpha_bar
    return {
        "tol_eq": 5.0 * mesh_err.residual if tol_eq is None else tol_eq,
        "tol_grad": 0.02 * a if tol_grad is None else tol_grad,
        "tol_obstacle": 10.0 * mesh_err.value if tol_obstacle is None else tol_obstacle,
        "tol_trace": 1e-12,
    }


def extract_regions(v: ScalarField, model: GameModel, tol_grad: float, tol_obstacle: float):
    """Node labels and boundary polylines (t, x_boundary, kind)."""
    TT, XX = np.meshgrid(v.t, v.x, indexing="ij")
    gap = v.values - model.g(TT, XX)
    grad = np.abs(v.dx())
    lab = np.full(v.values.shape, INACTION, dtype=np.int8)
    lab[grad >= model.alpha_bar - tol_grad] = ACTION
    lab[gap <= tol_obstacle] = STOP
    lab[-1, :] = STOP
    lab[:, 0] = STOP
    boundaries = []
    x = v.x
    for kind, level in (("stop", gap - tol_obstacle), ("action", grad - (model.alpha_bar - tol_grad))):
        for n in range(v.t.size):
            f = level[n]
            idx = np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0)[0]
            for j in idx:
                xb = x[j] - f[j] * (x[j + 1] - x[j]) / (f[j + 1] - f[j])
                boundaries.append((float(v.t[n]), float(xb), kind))
    return lab, boundaries


def stop_sections_attached(labels: np.ndarray, xmask=None) -> float:
    """Fraction of time slices whose STOP set is an interval starting at x = 0."""
    ok = 0
    rows = labels[:-1]
    for row in rows:
        r = row if xmask is None else row[xmask]
        s = np.nonzero(r == STOP)[0]
        ok += bool(s.size and s[0] == 0 and np.all(np.diff(s) == 1))
    return ok / max(rows.shape[0], 1)


def verify_variational_inequality(v: ScalarField, model: GameModel, tolerances: dict,
                                  region: Optional[np.ndarray] = None,
                                  min_pass: float = 0.99) -> VIReport:
    """Per-line pass rates for the seven conditions of the variational inequality.

    ``region`` restricts the interior checks (boolean mask on the mesh).
    """
    TT, XX = np.meshgrid(v.t, v.x, indexing="ij")
    g = model.g(TT, XX)
    R = model_residual(v, model)
    grad = np.abs(v.dx())
    tol_eq, tol_grad = tolerances["tol_eq"], tolerances["tol_grad"]
    tol_obs, tol_tr = tolerances["tol_obstacle"], tolerances.get("tol_trace", 1e-12)
    a = model.alpha_bar
    interior = np.zeros(v.values.shape, bool)
    interior[:-1, 1:-1] = True
    if region is not None:
        interior &= region
    everywhere = np.ones_like(interior) if region is None else region.copy()
    cont = interior & (v.values - g > tol_obs)
    inact = interior & (grad < a - tol_grad)

    def line(mask, passed):
        n = int(mask.sum())
        k = int((passed & mask).sum())
        rate = 1.0 if n == 0 else k / n
        return {"applicable": n, "passed": k, "rate": rate, "ok": rate >= min_pass}

    lines = {
        "equation": line(cont & inact, np.abs(R) <= tol_eq),
        "continuation supersolution": line(cont, R >= -tol_eq),
        "inaction subsolution": line(inact, R <= tol_eq),
        "obstacle": line(everywhere, v.values >= g - tol_obs),
        "gradient": line(interior, grad <= a + tol_grad),
    }
    bd = np.zeros_like(interior)
    bd[:, 0] = True
    term = np.zeros_like(interior)
    term[-1] = True
    if region is not None:
        bd &= region
        term &= region
    lines["boundary trace"] = line(bd, np.abs(v.values - g) <= tol_tr * (1 + np.abs(g)))
    lines["terminal trace"] = line(term, np.abs(v.values - g) <= tol_tr * (1 + np.abs(g)))
    c = float(np.max(np.abs(v.values[everywhere]) / (1 + XX[everywhere] ** 2)))
    return VIReport(lines, dict(tolerances), c, all(l["ok"] for l in lines.values()))


def verification_region(v: ScalarField, monitor: Monitor):
    """x <= monitor upper edge, all times: keeps the checks away from the far cut-off."""
    return np.broadcast_to(v.x <= monitor.x_hi + 1e-12, v.values.shape).copy()


def finalize(solution: ValueSolution, options: SolverOptions | None = None,
             tol_grad=None, tol_obstacle=None, tol_eq=None) -> ValueSolution:
    """Attach mesh-error estimate, regions, boundaries and the VI report."""
    me = mesh_error_estimate(solution, options)
    tols = _tolerances(solution, me, tol_grad, tol_obstacle, tol_eq)
    lab, bnd = extract_regions(solution.v, solution.model, tols["tol_grad"], tols["tol_obstacle"])
    region = verification_region(solution.v, solution.schedule.monitor)
    rep = verify_variational_inequality(solution.v, solution.model, tols, region)
    solution.regions, solution.boundaries = lab, bnd
    xm = solution.v.x <= solution.schedule.monitor.x_hi
    solution.diagnostics.update({
        "mesh_error": me.to_dict(), "tolerances": tols, "vi": rep.to_dict(),
        "stop_sections_attached": stop_sections_attached(lab, xm),
        "max_abs_dx_interior": float(np.max(np.abs(solution.v.dx())[:-1, 1:-1][:, xm[1:-1]])),
    })
    solution.vi_report = rep
    return solution


# properties --------------------------------------------------------------

def maximality_probe(solution: ValueSolution, factor: float = 10.0,
                     options: SolverOptions | None = None) -> dict:
    """Re-solve the last stage with delta and eps divided by ``factor``.

    Returns the largest excess of the tighter field over v on the monitor.
    """
    stage = solution.schedule.stages[-1]
    p = stage.params
    q = replace(p, delta=p.delta / factor, eps=p.eps / factor)
    bundle = assemble(solution.model, q)
    u = solve_penalized(bundle, Mesh(solution.v.t, solution.v.x, bundle.zeta), options)
    mask = solution.schedule.monitor.mask(u.mesh)
    excess = float(np.max((u.values - solution.v.values)[mask]))
    return {"params": q.to_dict(), "max_excess": excess,
            "ok": excess <= solution.schedule.stage_tol, "field": u}


def modulus_constant(v: ScalarField, monitor: Monitor, exponent: float = 1.0 / 8.0,
                     eta_max: float = 1.0) -> float:
    """Smallest C with |v(t,x1)-v(t,x2)| <= C |x1-x2|^exponent for node pairs in the monitor."""
    mask = monitor.mask(v.mesh)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    x = v.x[cols]
    V = v.values[np.ix_(rows, cols)]
    best = 0.0
    for k in range(1, x.size):
        eta = x[k:] - x[:-k]
        ok = eta <= eta_max
        if not ok.any():
            break
        d = np.abs(V[:, k:] - V[:, :-k])[:, ok] / eta[ok] ** exponent
        best = max(best, float(d.max()))
    return best


def gradient_sup(v: ScalarField, t_frac=0.8, x_lo=0.5, x_hi=None) -> float:
    x_hi = x_hi if x_hi is not None else 0.5 * v.x[-1]
    mask = Monitor(t_frac, x_lo, x_hi).mask(v.mesh)
    return float(np.max(np.abs(v.dx())[mask]))
