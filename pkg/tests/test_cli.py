import csv
import json
import subprocess
import sys

import pytest

from stopgame.cli import main

SMALL = {
    "schema": "stopgame-config/1",
    "model": {"builtin": "gbm-quad"},
    "schedule": {"stages": [{"N": 100, "kappa": 0.05, "eps": 0.1, "delta": 0.01, "m": 8,
                             "n_t": 100, "n_x": 80},
                            {"N": 100, "kappa": 0.05, "eps": 0.05, "delta": 0.005, "m": 8,
                             "n_t": 100, "n_x": 113}]},
    "simulation": {"n_paths": 600, "dt": 0.01, "seed": 1, "start_points": [[0, 1]], "n_random": 2},
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if isinstance(doc, dict) else doc)
    return str(p)


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write(d, SMALL)
    assert main(["solve", "--config", cfg, "--out", str(d / "out")]) == 0
    return d, cfg


# validate -------------------------------------------------------------------------

def test_validate_builtin_ok(tmp_path, capsys):
    assert main(["validate", "--config", write(tmp_path, SMALL)]) == 0
    assert "[ok] gradient bound" in capsys.readouterr().out


def test_validate_convertible_bond_fails(tmp_path, capsys):
    doc = dict(SMALL, model={"builtin": "convertible-bond"})
    assert main(["validate", "--config", write(tmp_path, doc)]) == 1
    assert "Theta(T,0)" in capsys.readouterr().err
    assert main(["validate", "--config", write(tmp_path, doc), "--allow-violations"]) == 0


@pytest.mark.parametrize("bad", ["{not json", json.dumps({"schema": "other"}),
                                 json.dumps(dict(SMALL, extra=1)),
                                 json.dumps(dict(SMALL, model={"builtin": "nope"})),
                                 json.dumps(dict(SMALL, tolerances={"tol_eq": 5.0})),
                                 json.dumps(dict(SMALL, model={"mu": "x +", "sigma": "x", "r": 0.05,
                                                               "alpha_bar": 1, "T": 1, "g": "1",
                                                               "h": "x"}))])
def test_malformed_config_exit_2(tmp_path, bad, capsys):
    assert main(["validate", "--config", write(tmp_path, bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "nope.json")]) == 2


def test_unknown_command_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate", "--config", write(tmp_path, SMALL)])
    assert ei.value.code == 2


# solve ----------------------------------------------------------------------------

def test_solve_writes_five_files(solved):
    d, _ = solved
    out = d / "out"
    names = {"value.csv", "regions.csv", "boundaries.csv", "diagnostics.json", "manifest.json"}
    assert names <= {p.name for p in out.iterdir()}
    with open(out / "value.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "x", "u", "du_dx"]
    with open(out / "regions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x", "label"] and {r[2] for r in rows[1:]} <= {"STOP", "INACTION", "ACTION"}
    with open(out / "boundaries.csv") as fh:
        assert next(csv.reader(fh)) == ["t", "x_boundary", "kind"]
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["input_hash"]) == 40
    assert man["config"] == SMALL
    assert set(man["outputs"]) == {"value.csv", "regions.csv", "boundaries.csv"}


def test_manifest_reproducible(solved, tmp_path):
    d, cfg = solved
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    a = json.loads((d / "out" / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert a == b
    assert (d / "out" / "value.csv").read_bytes() == (tmp_path / "value.csv").read_bytes()


def test_stage_only(solved, tmp_path):
    _, cfg = solved
    assert main(["solve", "--config", cfg, "--out", str(tmp_path), "--stage-only", "0"]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["stage_only"] == 0 and len(man["schedule"]["stages"]) == 1
    assert main(["solve", "--config", cfg, "--out", str(tmp_path), "--stage-only", "7"]) == 2


def test_invalid_mesh_exit_2(tmp_path):
    doc = json.loads(json.dumps(SMALL))
    doc["schedule"]["stages"][0]["n_x"] = 1
    assert main(["solve", "--config", write(tmp_path, doc), "--out", str(tmp_path / "o")]) == 2


def test_solve_needs_out(tmp_path):
    assert main(["solve", "--config", write(tmp_path, SMALL)]) == 2


def test_verify_writes_report(solved, tmp_path):
    _, cfg = solved
    code = main(["verify", "--config", cfg, "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "vi_report.json").read_text())
    assert code == (0 if rep["ok"] else 1)
    assert len(rep["lines"]) == 7


# simulate -------------------------------------------------------------------------

def test_simulate_without_artifacts(tmp_path, capsys):
    assert main(["simulate", "--config", write(tmp_path, SMALL), "--out", str(tmp_path / "o")]) == 2
    assert "run `solve`" in capsys.readouterr().err


def test_simulate_zero_paths(solved):
    d, _ = solved
    doc = json.loads(json.dumps(SMALL))
    doc["simulation"]["n_paths"] = 0
    assert main(["simulate", "--config", write(d, doc, "zero.json"), "--out", str(d / "out")]) == 2


def test_simulate_rejects_other_model(solved):
    d, _ = solved
    doc = dict(SMALL, model={"builtin": "gbm-quad", "params": {"alpha_bar": 1.2}})
    assert main(["simulate", "--config", write(d, doc, "other.json"), "--out", str(d / "out")]) == 2


def test_simulate_deterministic_and_seed_stable(solved):
    d, cfg = solved
    out = d / "out"
    main(["simulate", "--config", cfg, "--out", str(out)])
    first = (out / "saddle_report.json").read_bytes()
    stats = (out / "payoff_stats.csv").read_text()
    main(["simulate", "--config", cfg, "--out", str(out)])
    assert (out / "saddle_report.json").read_bytes() == first
    assert stats.splitlines()[0] == "t,x,strategy,mean,se"
    a = json.loads(first)["points"][0]["optimal"]
    main(["simulate", "--config", cfg, "--out", str(out), "--seed", "2"])
    b = json.loads((out / "saddle_report.json").read_text())["points"][0]["optimal"]
    assert a["mean"] != b["mean"]
    assert abs(a["mean"] - b["mean"]) <= 6 * (a["se"] ** 2 + b["se"] ** 2) ** 0.5


def test_console_script_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stopgame", "validate", "--config", write(tmp_path, SMALL)],
                       capture_output=True, text=True)
    assert r.returncode == 0
