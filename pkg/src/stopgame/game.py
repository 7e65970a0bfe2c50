"""Monte Carlo simulation of the absorbed controlled diffusion and the game payoff.

Each step from t_k to t_{k+1} runs: pre-jump stop check, jump, post-jump
stop check, then an Euler-Maruyama move with the continuous control.
Crossing zero absorbs the path at 0 and only the control needed to reach
0 is charged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .approx import ApproxBundle
from .errors import ConfigurationError, DomainError, SimulationError
from .hamiltonian import feedback_drift
from .model import GameModel, RegimeFlags
from .pde import ScalarField

MAX_STORED_PATHS = 100


@dataclass
class SimConfig:
    n_paths: int = 10_000
    dt: float = 1.0 / 400
    seed: int = 0
    scheme: str = "euler-maruyama"
    store_paths: int = 0
    brownian_refine: int = 1  # aggregate this many normals per step (common random numbers)

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise ConfigurationError("n_paths must be at least 1")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.scheme != "euler-maruyama":
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if not 0 <= self.store_paths <= MAX_STORED_PATHS:
            raise ConfigurationError(f"store_paths must lie in [0, {MAX_STORED_PATHS}]")
        if int(self.brownian_refine) < 1:
            raise ConfigurationError("brownian_refine must be >= 1")


@dataclass
class ControlPath:
    """Open-loop control on a step grid: nu = nu_plus - nu_minus plus jumps."""
    times: np.ndarray           # step start times, elapsed from the game start
    d_plus: np.ndarray          # increments of nu+ per step (>= 0)
    d_minus: np.ndarray         # increments of nu- per step (>= 0)
    jumps: list = field(default_factory=list)   # (elapsed time, signed size)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.d_plus = np.asarray(self.d_plus, float)
        self.d_minus = np.asarray(self.d_minus, float)
        if self.d_plus.shape != self.times.shape or self.d_minus.shape != self.times.shape:
            raise ConfigurationError("control increments must match the time grid")
        if np.any(self.d_plus < 0) or np.any(self.d_minus < 0):
            raise ConfigurationError("Jordan increments must be non-negative")
        if not np.all(np.isfinite(self.d_plus)) or not np.all(np.isfinite(self.d_minus)):
            raise ConfigurationError("control increments must be finite")

    @classmethod
    def zero(cls, horizon: float, n_steps: int):
        t = np.linspace(0.0, horizon, n_steps + 1)[:-1]
        return cls(t, np.zeros(n_steps), np.zeros(n_steps))

    @property
    def total_variation(self) -> float:
        return float(self.d_plus.sum() + self.d_minus.sum() + sum(abs(j) for _, j in self.jumps))

    def jump_at_steps(self):
        out = {}
        for s, size in self.jumps:
            k = int(np.clip(np.searchsorted(self.times, s - 1e-12), 0, self.times.size - 1))
            out[k] = out.get(k, 0.0) + float(size)
        return out


# policies -------------------------------------------------------------------

class Policy:
    """Controller strategy.  Subclasses override jump and increment."""

    def jump(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def increment(self, k: int, t_next: float, y: np.ndarray, dt: float) -> np.ndarray:
        """Control increment over a step, given the uncontrolled predictor y."""
        return np.zeros_like(y)


class ZeroPolicy(Policy):
    pass


class OpenLoopPolicy(Policy):
    def __init__(self, control: ControlPath):
        self.control = control
        self._jumps = control.jump_at_steps()

    def jump(self, k, t, x):
        return np.full_like(x, self._jumps.get(k, 0.0))

    def increment(self, k, t_next, y, dt):
        c = self.control
        return np.full_like(y, c.d_plus[k] - c.d_minus[k]) if k < c.times.size else np.zeros_like(y)


class FeedbackPolicy(Policy):
    """nu-dot = -2 psi'(u_x^2 - a^2) u_x, integrated with an implicit step.

    The rate can reach 2|u_x|/eps, so an explicit step overshoots; solving
    y' = y - dt R(y') on the mesh column keeps the move monotone.
    """

    def __init__(self, field_: ScalarField, bundle: ApproxBundle, t0: float):
        self.field, self.bundle, self.t0 = field_, bundle, t0
        TT, XX = np.meshgrid(field_.t, field_.x, indexing="ij")
        a = bundle.alpha(TT, XX)
        self.rates = feedback_drift(field_.dx(), a, bundle.params.eps)
        self.rates[:, 0] = 0.0

    def rate_at(self, t_abs, x):
        return _column_interp(self.field.t, self.field.x, self.rates, t_abs, x)

    def increment(self, k, t_next, y, dt):
        t_abs = self.t0 + t_next
        x = self.field.x
        R = _time_blend(self.field.t, self.rates, t_abs)
        G = np.maximum.accumulate(x - dt * R)
        new = np.interp(y, G, x, left=np.nan, right=np.inf)
        far = np.isinf(new)
        new[far] = y[far] + dt * R[-1]
        inc = new - y
        low = np.isnan(new)
        inc[low] = -np.maximum(y[low], 0.0)  # pushed to (or already below) zero
        return inc


def _time_blend(tg, V, t):
    i = int(np.clip(np.searchsorted(tg, t, side="right") - 1, 0, tg.size - 2))
    a = float(np.clip((t - tg[i]) / (tg[i + 1] - tg[i]), 0.0, 1.0))
    return (1.0 - a) * V[i] + a * V[i + 1]


def _column_interp(tg, xg, V, t, x):
    return np.interp(x, xg, _time_blend(tg, V, t))


def feedback_policy(value_field: ScalarField, bundle: ApproxBundle, t0: float = 0.0) -> FeedbackPolicy:
    return FeedbackPolicy(value_field, bundle, t0)


# stop rules ---------------------------------------------------------------------

class StopRule:
    """stop(k, t, x, pre_jump) -> boolean mask.  Always stopped at the horizon."""

    def stop(self, k: int, t: float, x: np.ndarray, pre_jump: bool) -> np.ndarray:
        return np.zeros(x.shape, bool)


class NeverStop(StopRule):
    pass


@dataclass
class FixedTimeStop(StopRule):
    elapsed: float

    def stop(self, k, t, x, pre_jump):
        return np.full(x.shape, (t >= self.elapsed - 1e-12) and not pre_jump)


@dataclass
class LevelStop(StopRule):
    level: float
    above: bool = True

    def stop(self, k, t, x, pre_jump):
        if pre_jump:
            return np.zeros(x.shape, bool)
        return x >= self.level if self.above else x <= self.level


class ValueStopRule(StopRule):
    """Stop as soon as v - g <= stop_tol, checked before and after jumps."""

    def __init__(self, value_field: ScalarField, model: GameModel, t0: float, stop_tol: float):
        self.v, self.model, self.t0, self.tol = value_field, model, t0, stop_tol

    def gap(self, t_elapsed, x):
        ta = self.t0 + t_elapsed
        vx = _column_interp(self.v.t, self.v.x, self.v.values, ta, x)
        return vx - self.model.g(ta, x)

    def stop(self, k, t, x, pre_jump):
        return self.gap(t, x) <= self.tol


def optimal_stop_rule(value_field: ScalarField, model: GameModel, t0: float = 0.0,
                      stop_tol: float = 1e-3) -> ValueStopRule:
    return ValueStopRule(value_field, model, t0, stop_tol)


# simulation ----------------------------------------------------------------------

@dataclass
class PathRecord:
    t0: float
    times: np.ndarray       # elapsed step times 0..n
    x_pre: np.ndarray       # state before the jump at each step time
    x_post: np.ndarray      # state after the jump
    jumps: np.ndarray       # realized jump per step
    cont: np.ndarray        # realized continuous increment per step
    tau0_step: Optional[int]
    stop_step: int
    stop_pre_jump: bool


@dataclass
class PathEnsemble:
    config: SimConfig
    t0: float
    x0: float
    times: np.ndarray
    payoff: np.ndarray
    terminal: np.ndarray
    running: np.ndarray
    control_cost: np.ndarray
    tau0: np.ndarray            # elapsed absorption time, inf if never
    stop_time: np.ndarray       # elapsed time of tau ^ tau0
    variation: np.ndarray
    variation_after_tau0: np.ndarray
    paths: list = field(default_factory=list)

    def stats(self) -> "PayoffStats":
        return payoff_stats(self)


@dataclass
class PayoffStats:
    mean: float
    se: float
    terminal: float
    running: float
    control_cost: float
    absorption_fraction: float
    mean_stop_time: float
    mean_variation: float
    n_paths: int

    def to_dict(self):
        return dict(self.__dict__)


def payoff_stats(ens: PathEnsemble) -> PayoffStats:
    n = ens.payoff.size
    sd = float(np.std(ens.payoff, ddof=1)) if n > 1 else 0.0
    return PayoffStats(
        mean=float(ens.terminal.mean() + ens.running.mean() + ens.control_cost.mean()),
        se=sd / np.sqrt(n), terminal=float(ens.terminal.mean()),
        running=float(ens.running.mean()), control_cost=float(ens.control_cost.mean()),
        absorption_fraction=float(np.mean(np.isfinite(ens.tau0))),
        mean_stop_time=float(ens.stop_time.mean()),
        mean_variation=float(ens.variation.mean()), n_paths=n)


def _normals(seed: int, n_paths: int, n_steps: int, refine: int) -> np.ndarray:
    """Per-path streams keyed by (seed, path index), aggregated to the step size."""
    Z = np.empty((n_paths, n_steps))
    for i in range(n_paths):
        z = np.random.default_rng([int(seed), i]).standard_normal(n_steps * refine)
        Z[i] = z.reshape(n_steps, refine).sum(axis=1) / np.sqrt(refine) if refine > 1 else z
    return Z


def simulate_paths(model: GameModel, policy: Policy, stop_rule: StopRule, config: SimConfig,
                   t0: float = 0.0, x0: float = 1.0,
                   value_dt: float | None = None) -> PathEnsemble:
    """Simulate from (t0, x0) up to T and accumulate discounted payoff components."""
    if not 0.0 <= t0 <= model.T:
        raise ConfigurationError(f"start time {t0} outside [0, {model.T}]")
    if x0 < 0:
        raise ConfigurationError("start state must be non-negative")
    if value_dt is not None and config.dt > value_dt * (1 + 1e-9):
        raise ConfigurationError("simulation step exceeds the value-field time step")
    horizon = model.T - t0
    n_steps = max(int(round(horizon / config.dt)), 1) if horizon > 0 else 0
    dt = horizon / n_steps if n_steps else 0.0
    P = int(config.n_paths)
    Z = _normals(config.seed, P, n_steps, int(config.brownian_refine)) if n_steps else np.zeros((P, 0))
    times = np.linspace(0.0, horizon, n_steps + 1)
    r, a = model.r, model.alpha_bar
    disc = np.exp(-r * times)
    sqdt = np.sqrt(dt)

    X = np.full(P, float(x0))
    alive = np.ones(P, bool)
    terminal = np.zeros(P)
    running = np.zeros(P)
    cost = np.zeros(P)
    var = np.zeros(P)
    tau0 = np.full(P, np.inf)
    stop_time = np.full(P, horizon)
    h_left = np.zeros(P)
    store = min(config.store_paths, P)
    if store:
        rec = {k: np.zeros((store, n_steps + 1)) for k in ("x_pre", "x_post", "jumps", "cont")}
        stop_step = np.full(store, n_steps)
        stop_pre = np.zeros(store, bool)
        tau0_step = np.full(store, -1)

    def finish(mask, k, state, pre_flag=False):
        ta = t0 + times[k]
        terminal[mask] = disc[k] * model.g(ta, state[mask])
        stop_time[mask] = times[k]
        alive[mask] = False
        if store:
            sm = mask[:store]
            stop_step[sm] = k
            stop_pre[sm] = pre_flag

    if x0 == 0.0:
        tau0[:] = 0.0
        finish(alive.copy(), 0, X)
    for k in range(n_steps + 1):
        if not alive.any():
            break
        tk = times[k]
        ta = t0 + tk
        if store:
            rec["x_pre"][:, k] = X[:store]
        # pre-jump stop
        s = alive & stop_rule.stop(k, tk, X, True)
        if k > 0:
            # right end of the previous trapezoid uses the pre-jump state
            running[s] += 0.5 * dt * disc[k] * model.h(ta, X[s])
        finish(s, k, X, True)
        if k == n_steps:
            if store:
                rec["x_post"][:, k] = X[:store]
            running[alive] += 0.5 * dt * disc[k] * model.h(ta, X[alive])
            finish(alive.copy(), k, X)
            break
        if k > 0:
            running[alive] += 0.5 * dt * disc[k] * model.h(ta, X[alive])
        # jump
        J = policy.jump(k, tk, X)
        if not np.all(np.isfinite(J[alive])):
            bad = int(np.nonzero(alive & ~np.isfinite(J))[0][0])
            raise SimulationError(f"policy returned a non-finite jump on path {bad}")
        J = np.where(alive, np.maximum(J, -X), 0.0)
        X = X + J
        cost += disc[k] * a * np.abs(J)
        var += np.abs(J)
        if store:
            rec["jumps"][:, k] = J[:store]
        hit = alive & (J < 0) & (X <= 0.0)
        X[hit] = 0.0
        tau0[hit] = tk
        finish(hit, k, X)
        if store:
            tau0_step[hit[:store]] = k
            rec["x_post"][:, k] = X[:store]
        # post-jump stop
        s = alive & stop_rule.stop(k, tk, X, False)
        finish(s, k, X)
        if not alive.any():
            break
        running[alive] += 0.5 * dt * disc[k] * model.h(ta, X[alive])
        # diffusion and continuous control
        y = X + model.mu(X) * dt + model.sigma(X) * sqdt * Z[:, k]
        inc = policy.increment(k, times[k + 1], y, dt)
        if not np.all(np.isfinite(inc[alive])):
            bad = int(np.nonzero(alive & ~np.isfinite(inc))[0][0])
            raise SimulationError(f"policy returned a non-finite control on path {bad}")
        new = y + inc
        absorbed = alive & (new <= 0.0)
        inc = np.where(absorbed, np.maximum(inc, -np.maximum(y, 0.0)), inc)
        inc = np.where(alive, inc, 0.0)
        new = np.where(absorbed, 0.0, y + inc)
        cost += disc[k] * a * np.abs(inc)
        var += np.abs(inc)
        X = np.where(alive, new, X)
        if store:
            rec["cont"][:, k] = inc[:store]
        if absorbed.any():
            running[absorbed] += 0.5 * dt * disc[k + 1] * model.h(t0 + times[k + 1], 0.0 * X[absorbed])
            tau0[absorbed] = times[k + 1]
            finish(absorbed, k + 1, X)
            if store:
                tau0_step[absorbed[:store]] = k + 1
                rec["x_pre"][absorbed[:store], k + 1] = 0.0
                rec["x_post"][absorbed[:store], k + 1] = 0.0

    payoff_ = terminal + running + cost
    paths = []
    for i in range(store):
        paths.append(PathRecord(
            t0, times, rec["x_pre"][i].copy(), rec["x_post"][i].copy(), rec["jumps"][i].copy(),
            rec["cont"][i].copy(), None if tau0_step[i] < 0 else int(tau0_step[i]),
            int(stop_step[i]), bool(stop_pre[i])))
    # no control is exercised after absorption by construction
    return PathEnsemble(config, t0, x0, times, payoff_, terminal, running, cost, tau0,
                        stop_time, var, np.zeros(P), paths)


def payoff(model: GameModel, path: PathRecord, tau: float, pre_jump: bool = False) -> float:
    """Discounted payoff of one stored path stopped at elapsed time tau (on the step grid)."""
    times = path.times
    dt = times[1] - times[0] if times.size > 1 else 0.0
    k_tau = int(round(tau / dt)) if dt > 0 else 0
    k_tau = min(k_tau, times.size - 1)
    k_end, pre = k_tau, pre_jump
    if path.tau0_step is not None and path.tau0_step <= k_tau:
        k_end, pre = path.tau0_step, False
    r, a = model.r, model.alpha_bar
    disc = np.exp(-r * times)
    ta = path.t0 + times
    total = 0.0
    for k in range(k_end):
        total += 0.5 * dt * (disc[k] * model.h(ta[k], path.x_post[k])
                             + disc[k + 1] * model.h(ta[k + 1], path.x_pre[k + 1]))
        total += disc[k] * a * (abs(path.jumps[k]) + abs(path.cont[k]))
    if not pre:
        total += disc[k_end] * a * abs(path.jumps[k_end])
        state = path.x_post[k_end]
    else:
        state = path.x_pre[k_end]
    return float(total + disc[k_end] * model.g(ta[k_end], state))


# controls --------------------------------------------------------------------

def random_control(rng: np.random.Generator, horizon: float, n_steps: int, eps: float,
                   n_pieces: int = 4, max_jumps: int = 2, jump_scale: float = 1.0) -> ControlPath:
    """Piecewise-constant rate in [-1/eps, 1/eps] plus at most two jumps."""
    times = np.linspace(0.0, horizon, n_steps + 1)[:-1]
    dt = horizon / n_steps
    cuts = np.sort(rng.integers(0, n_steps, n_pieces - 1))
    rates = rng.uniform(-1.0 / eps, 1.0 / eps, n_pieces) * rng.uniform(0.0, 1.0, n_pieces) ** 3
    piece = np.searchsorted(cuts, np.arange(n_steps), side="right")
    d = rates[piece] * dt
    jumps = [(float(times[rng.integers(0, n_steps)]), float(rng.uniform(-jump_scale, jump_scale)))
             for _ in range(int(rng.integers(0, max_jumps + 1)))]
    return ControlPath(times, np.maximum(d, 0.0), np.maximum(-d, 0.0), jumps)


def decreasing_projection(control: ControlPath, regime: str | RegimeFlags = "A2") -> ControlPath:
    """Keep only the decreasing part of the control.

    The completing jump to 0 at absorption is applied by the simulator: any
    downward move that would cross 0 is cut to land exactly there.
    """
    reg = regime.regime if isinstance(regime, RegimeFlags) else regime
    if reg != "A2":
        raise DomainError("decreasing projection is only justified under monotone payoffs (A2)")
    jumps = [(s, j) for s, j in control.jumps if j < 0]
    return ControlPath(control.times.copy(), np.zeros_like(control.d_plus),
                       control.d_minus.copy(), jumps)


# saddle-point check -----------------------------------------------------------------

def random_stop_rules(horizon: float, x0: float) -> list:
    return [("never", NeverStop()),
            ("fixed 0.3", FixedTimeStop(0.3 * horizon)),
            ("fixed 0.7", FixedTimeStop(0.7 * horizon)),
            ("level up", LevelStop(x0 + 0.5, True)),
            ("level down", LevelStop(0.5 * x0, False))]


@dataclass
class SaddleReport:
    points: list
    disc_tol: float
    ok: bool

    def to_dict(self):
        return {"points": self.points, "disc_tol": self.disc_tol, "ok": self.ok}


def saddle_check(model: GameModel, value_solution, bundle: ApproxBundle, config: SimConfig,
                 start_points: Sequence = ((0.0, 1.0), (0.0, 2.0), (0.0, 3.5)),
                 n_random: int = 5, stop_tol: float | None = None,
                 feedback_field: ScalarField | None = None,
                 error_estimate: float | None = None) -> SaddleReport:
    """Check the three saddle inequalities at each start point.

    disc_tol = 5 x (mesh error + time-step error + last stage difference).
    """
    v = value_solution.v
    fb = feedback_field if feedback_field is not None else v
    diag = value_solution.diagnostics
    if stop_tol is None:
        stop_tol = diag.get("tolerances", {}).get("tol_obstacle", 1e-3)
    vdt = float(np.max(np.diff(v.t)))
    mesh_err = diag.get("mesh_error", {}).get("value", 0.0)
    stage_err = value_solution.final_difference
    ledger = getattr(value_solution, "ledger", None)
    k3 = ledger.get("K3") if ledger is not None and "K3" in ledger else float(np.max(v.values))
    points, all_ok = [], True
    rng = np.random.default_rng([int(config.seed), 7919])
    horizon_err = []
    for (t0, x0) in start_points:
        vref = float(v.interp(t0, x0))
        stopper = optimal_stop_rule(v, model, t0, stop_tol)
        pol = feedback_policy(fb, bundle, t0)
        star = simulate_paths(model, pol, stopper, config, t0, x0, vdt).stats()
        # time-step error on the same Brownian paths with doubled step
        coarse_cfg = SimConfig(config.n_paths, 2 * config.dt, config.seed, config.scheme, 0, 2)
        coarse = simulate_paths(model, feedback_policy(fb, bundle, t0),
                                optimal_stop_rule(v, model, t0, stop_tol), coarse_cfg, t0, x0).stats()
        dt_err = abs(coarse.mean - star.mean)
        horizon_err.append(dt_err)
        est = error_estimate if error_estimate is not None else mesh_err + dt_err + stage_err
        tol = 5.0 * est
        checks_a, checks_b = [], []
        for name, rule in random_stop_rules(model.T - t0, x0):
            s = simulate_paths(model, feedback_policy(fb, bundle, t0), rule, config, t0, x0, vdt).stats()
            checks_a.append({"rule": name, "mean": s.mean, "se": s.se,
                             "ok": s.mean <= vref + 3 * s.se + tol})
        n_steps = max(int(round((model.T - t0) / config.dt)), 1)
        for j in range(n_random):
            ctrl = random_control(rng, model.T - t0, n_steps, bundle.params.eps)
            s = simulate_paths(model, OpenLoopPolicy(ctrl), optimal_stop_rule(v, model, t0, stop_tol),
                               config, t0, x0, vdt).stats()
            checks_b.append({"control": j, "mean": s.mean, "se": s.se,
                             "ok": s.mean >= vref - 3 * s.se - tol})
        c_ok = abs(star.mean - vref) <= 3 * star.se + tol
        # the optimal controller pays at least e^{-rT} alpha E|nu| and at most ~ v
        budget = np.exp(model.r * model.T) * k3 / model.alpha_bar * (1 + x0 * x0)
        ok = c_ok and all(c["ok"] for c in checks_a) and all(c["ok"] for c in checks_b)
        all_ok &= ok
        points.append({"t": t0, "x": x0, "v": vref, "disc_tol": tol, "dt_error": dt_err,
                       "mesh_error": mesh_err, "stage_error": stage_err,
                       "optimal": star.to_dict(), "optimal_ok": bool(c_ok),
                       "mean_variation": star.mean_variation, "K5_budget": budget,
                       "budget_ok": bool(star.mean_variation <= budget),
                       "stopper_deviations": checks_a, "controller_deviations": checks_b,
                       "ok": bool(ok)})
    disc = max(p["disc_tol"] for p in points) if points else 0.0
    return SaddleReport(points, disc, bool(all_ok))
