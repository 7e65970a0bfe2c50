"""Command-line entry point: validate | solve | simulate | verify."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .approx import PenalizationParams, assemble
from .continuation import (LABELS, LimitSchedule, Monitor, Stage, ValueSolution, default_schedule,
                           finalize, run_schedule)
from .errors import ConfigurationError, ParameterError, StopGameError
from .expr import compile_expr
from .game import SimConfig, saddle_check
from .model import BUILTINS, GameModel, RegimeFlags, builtin_model, validate_assumptions
from .pde import Mesh, ScalarField, SolverOptions, _jsonable

SCHEMA = "stopgame-config/1"
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
TOP_KEYS = {"schema", "model", "schedule", "solver", "simulation", "tolerances"}


@dataclass
class RunConfig:
    raw: dict
    model: GameModel
    flags: RegimeFlags
    schedule: LimitSchedule
    solver: SolverOptions
    sim: SimConfig
    start_points: list
    n_random: int = 5
    tolerances: dict = field(default_factory=dict)

    def canonical(self) -> bytes:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()

    def content_hash(self) -> str:
        """Git-style blob hash of the canonical configuration."""
        data = self.canonical()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _need(d, key, where):
    if key not in d:
        raise ConfigurationError(f"{where}: missing key {key!r}")
    return d[key]


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigurationError(f"{where}: unknown keys {sorted(extra)}")


def build_model(spec: dict) -> tuple[GameModel, RegimeFlags]:
    _check_keys(spec, {"builtin", "params", "name", "mu", "sigma", "r", "alpha_bar", "T", "g", "h",
                       "dg_dt", "dg_dx", "d2g_dxx", "dh_dx", "holder_gamma", "regime",
                       "sigma_lipschitz"}, "model")
    flags = RegimeFlags(spec.get("regime", "A2"), bool(spec.get("sigma_lipschitz", True)))
    if "builtin" in spec:
        if spec["builtin"] not in BUILTINS:
            raise ConfigurationError(f"unknown built-in model {spec['builtin']!r}")
        return builtin_model(spec["builtin"], **spec.get("params", {})), flags
    one = lambda k: compile_expr(_need(spec, k, "model"), ("x",))
    two = lambda k: compile_expr(_need(spec, k, "model"), ("t", "x"))
    opt = lambda k: compile_expr(spec[k], ("t", "x")) if k in spec else None
    m = GameModel(mu=one("mu"), sigma=one("sigma"), r=float(_need(spec, "r", "model")),
                  alpha_bar=float(_need(spec, "alpha_bar", "model")),
                  T=float(_need(spec, "T", "model")), g=two("g"), h=two("h"),
                  dg_dt=opt("dg_dt"), dg_dx=opt("dg_dx"), d2g_dxx=opt("d2g_dxx"),
                  dh_dx=opt("dh_dx"), holder_gamma=float(spec.get("holder_gamma", 1.0)),
                  name=str(spec.get("name", "custom")))
    return m.with_fd_derivatives(), flags


def build_schedule(spec) -> LimitSchedule:
    if spec is None or spec == "default":
        return default_schedule()
    _check_keys(spec, {"stages", "stage_tol", "monitor"}, "schedule")
    stages = []
    for i, st in enumerate(_need(spec, "stages", "schedule")):
        _check_keys(st, {"N", "kappa", "eps", "delta", "m", "n_t", "n_x"}, f"schedule.stages[{i}]")
        p = PenalizationParams(*(float(_need(st, k, f"schedule.stages[{i}]"))
                                 for k in ("N", "kappa", "eps", "delta", "m")))
        n_t, n_x = int(st.get("n_t", 400)), int(st.get("n_x", 320))
        if n_t < 1 or n_x < 4:
            raise ConfigurationError(f"schedule.stages[{i}]: mesh needs n_t >= 1 and n_x >= 4")
        stages.append(Stage(p, n_t, n_x))
    mon = spec.get("monitor", {})
    _check_keys(mon, {"t_frac", "x_lo", "x_hi"}, "schedule.monitor")
    return LimitSchedule(stages, Monitor(**mon), float(spec.get("stage_tol", 0.02)))


def load_config(path, seed=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: line {exc.lineno} col {exc.colno}: "
                                 f"{exc.msg}") from None
    return parse_config(raw, seed)


def parse_config(raw: dict, seed=None) -> RunConfig:
    _check_keys(raw, TOP_KEYS, "config")
    if raw.get("schema") != SCHEMA:
        raise ConfigurationError(f"config schema must be {SCHEMA!r}, got {raw.get('schema')!r}")
    raw = json.loads(json.dumps(raw))
    if seed is not None:
        raw.setdefault("simulation", {})["seed"] = int(seed)
    model, flags = build_model(_need(raw, "model", "config"))
    schedule = build_schedule(raw.get("schedule", "default"))
    sv = raw.get("solver", {})
    _check_keys(sv, {"scheme", "nonlinear_tol", "max_picard_iters", "upwind_drift",
                     "rannacher_startup_steps"}, "solver")
    solver = SolverOptions(**sv)
    sm = dict(raw.get("simulation", {}))
    _check_keys(sm, {"n_paths", "dt", "seed", "start_points", "n_random"}, "simulation")
    starts = [tuple(map(float, p)) for p in sm.pop("start_points", [[0.0, 1.0], [0.0, 2.0], [0.0, 3.5]])]
    n_random = int(sm.pop("n_random", 5))
    sim = SimConfig(**sm)
    tol = raw.get("tolerances", {})
    _check_keys(tol, {"tol_grad", "tol_obstacle", "tol_eq"}, "tolerances")
    for k, v in tol.items():
        if not (isinstance(v, (int, float)) and 0 < v < 1):
            raise ConfigurationError(f"tolerances.{k} must lie in (0, 1)")
    return RunConfig(raw, model, flags, schedule, solver, sim, starts, n_random, dict(tol))


# writers ---------------------------------------------------------------------

def _f(v):
    return repr(float(v))


def write_value_csv(path, v: ScalarField):
    du = v.dx()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "u", "du_dx"])
        for n, t in enumerate(v.t):
            for j, x in enumerate(v.x):
                w.writerow([_f(t), _f(x), _f(v.values[n, j]), _f(du[n, j])])


def read_value_csv(path) -> ScalarField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = np.unique(data[:, 0])
    x = np.unique(data[:, 1])
    if data.shape[0] != t.size * x.size:
        raise ConfigurationError(f"{path}: values do not form a tensor grid")
    return ScalarField(Mesh(t, x), data[:, 2].reshape(t.size, x.size))


def write_regions_csv(path, v: ScalarField, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "label"])
        for n, t in enumerate(v.t):
            for j, x in enumerate(v.x):
                w.writerow([_f(t), _f(x), LABELS[int(labels[n, j])]])


def write_boundaries_csv(path, boundaries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x_boundary", "kind"])
        for t, x, kind in boundaries:
            w.writerow([_f(t), _f(x), kind])


def _dump(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# commands ----------------------------------------------------------------------

def _validate(cfg: RunConfig, allow: bool, out=None):
    rep = validate_assumptions(cfg.model, cfg.flags)
    for c in rep.checks:
        print(f"[{'ok' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if out is not None:
        _dump(Path(out) / "validation.json", rep.to_dict())
    if not rep.ok and not allow:
        print(f"assumption check failed: {', '.join(c.name for c in rep.failed)}", file=sys.stderr)
        return False
    return True


def cmd_validate(cfg: RunConfig, args) -> int:
    return EXIT_OK if _validate(cfg, args.allow_violations, args.out) else EXIT_CHECK


def _solve(cfg: RunConfig, stage_only=None) -> ValueSolution:
    sched = cfg.schedule
    if stage_only is not None:
        if not 0 <= stage_only < len(sched.stages):
            raise ConfigurationError(f"--stage-only {stage_only}: schedule has {len(sched.stages)} stages")
        sched = LimitSchedule([sched.stages[stage_only]], sched.monitor, sched.stage_tol)
    sol = run_schedule(cfg.model, sched, cfg.solver,
                       log=lambda s: print(s, file=sys.stderr))
    return finalize(sol, cfg.solver, **cfg.tolerances)


def cmd_solve(cfg: RunConfig, args) -> int:
    if not _validate(cfg, args.allow_violations):
        return EXIT_CHECK
    out = Path(args.out)
    sol = _solve(cfg, args.stage_only)
    write_value_csv(out / "value.csv", sol.v)
    write_regions_csv(out / "regions.csv", sol.v, sol.regions)
    write_boundaries_csv(out / "boundaries.csv", sol.boundaries)
    diag = dict(sol.diagnostics)
    diag["stages"] = [{k: f.meta[k] for k in f.meta if k != "seconds"} for f in sol.stage_fields]
    diag["timings"] = [f.meta.get("seconds") for f in sol.stage_fields]
    _dump(out / "diagnostics.json", diag)
    manifest = {
        "version": __version__, "schema": SCHEMA, "input_hash": cfg.content_hash(),
        "config": cfg.raw, "stage_only": args.stage_only,
        "schedule": sol.schedule.to_dict(), "solver": cfg.solver.__dict__,
        "tolerances": sol.diagnostics["tolerances"], "constants": sol.ledger.to_dict(),
        "outputs": {n: _file_hash(out / n) for n in ("value.csv", "regions.csv", "boundaries.csv")},
    }
    _dump(out / "manifest.json", manifest)
    print(f"wrote 5 files to {out}; VI {'ok' if sol.vi_report.ok else 'FAILED'}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    if not _validate(cfg, args.allow_violations):
        return EXIT_CHECK
    sol = _solve(cfg, args.stage_only)
    rep = sol.vi_report
    for name, line in rep.lines.items():
        print(f"[{'ok' if line['ok'] else 'FAIL'}] {name}: {line['passed']}/{line['applicable']}")
    if args.out:
        _dump(Path(args.out) / "vi_report.json", rep.to_dict())
    return EXIT_OK if rep.ok else EXIT_CHECK


class _StoredSolution:
    """Enough of a ValueSolution for the saddle check, rebuilt from solve outputs."""

    def __init__(self, v, diagnostics):
        self.v = v
        self.diagnostics = diagnostics
        hist = diagnostics.get("stage_differences", [])
        self.final_difference = hist[-1] if hist else 0.0


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    need = [out / n for n in ("value.csv", "diagnostics.json", "manifest.json")]
    missing = [str(p) for p in need if not p.exists()]
    if missing:
        print(f"missing value artifacts: {', '.join(missing)}; run `solve` with the same "
              f"--config and --out first", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads((out / "manifest.json").read_text())
    solve_cfg = dict(cfg.raw)
    if manifest.get("config", {}).get("model") != solve_cfg.get("model") or \
            manifest.get("config", {}).get("schedule", "default") != solve_cfg.get("schedule", "default"):
        print("value artifacts were produced for a different model or schedule; rerun `solve`",
              file=sys.stderr)
        return EXIT_USAGE
    v = read_value_csv(out / "value.csv")
    diag = json.loads((out / "diagnostics.json").read_text())
    stages = manifest["schedule"]["stages"]
    p = PenalizationParams(**stages[-1]["params"])
    bundle = assemble(cfg.model, p)
    v.mesh.boundary_curve = bundle.zeta
    rep = saddle_check(cfg.model, _StoredSolution(v, diag), bundle, cfg.sim,
                       cfg.start_points, cfg.n_random)
    doc = rep.to_dict()
    doc["sim"] = cfg.sim.__dict__
    doc["input_hash"] = cfg.content_hash()
    _dump(out / "saddle_report.json", doc)
    with open(out / "payoff_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "strategy", "mean", "se"])
        for pt in rep.points:
            w.writerow([_f(pt["t"]), _f(pt["x"]), "optimal", _f(pt["optimal"]["mean"]),
                        _f(pt["optimal"]["se"])])
            for c in pt["stopper_deviations"]:
                w.writerow([_f(pt["t"]), _f(pt["x"]), f"stop:{c['rule']}", _f(c["mean"]), _f(c["se"])])
            for c in pt["controller_deviations"]:
                w.writerow([_f(pt["t"]), _f(pt["x"]), f"control:{c['control']}", _f(c["mean"]),
                            _f(c["se"])])
    for pt in rep.points:
        print(f"(t={pt['t']}, x={pt['x']}): v={pt['v']:.5f} J*={pt['optimal']['mean']:.5f} "
              f"+/- {pt['optimal']['se']:.5f} disc_tol={pt['disc_tol']:.4f} "
              f"{'ok' if pt['ok'] else 'FAIL'}")
    return EXIT_OK if rep.ok else EXIT_CHECK


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "simulate": cmd_simulate,
            "verify": cmd_verify}


def make_parser():
    ap = argparse.ArgumentParser(prog="stopgame", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override simulation seed")
    ap.add_argument("--stage-only", type=int, default=None, help="run a single schedule stage")
    ap.add_argument("--allow-violations", action="store_true",
                    help="continue when assumption checks fail")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command in ("solve", "simulate") and not args.out:
            raise ConfigurationError(f"{args.command} needs --out")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            if not out.is_dir():
                raise ConfigurationError(f"--out {out} is not a directory")
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StopGameError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
