import csv
import io
import json

import pytest

from fsihopf import __version__
from fsihopf.cli import OUT_ENV, run

TINY = """
[params]
lam = 1.0
omega_n_sq = 1.0
varpi = 1.0

[mesh]
box = -1.5, 1.5, -1.5, 1.5
h = 0.25
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(TINY)
    return p


def _json(path):
    return json.loads(path.read_text())


def test_steady_writes_snapshot_and_summary(tmp_path, cfg):
    out = tmp_path / "o"
    assert run(["steady", "--config", str(cfg), "--out", str(out)]) == 0
    s = _json(out / "summary.json")
    assert set(s) >= {"lambda", "chi0", "drag", "residual", "lambda1", "lambda2", "version", "config_hash"}
    assert s["version"] == __version__ and s["lambda"] == 1.0
    assert s["lambda2"] <= s["lambda1"]
    assert (out / "steady" / "u0.bin").is_file() and (out / "effective.cfg").is_file()
    assert list(s) == sorted(s)


def test_rerun_from_effective_config_is_bit_identical(tmp_path, cfg):
    out = tmp_path / "o"
    assert run(["steady", "--config", str(cfg), "--out", str(out)]) == 0
    first = (out / "summary.json").read_bytes()
    u0 = (out / "steady" / "u0.bin").read_bytes()
    assert run(["steady", "--config", str(out / "effective.cfg")]) == 0
    assert (out / "summary.json").read_bytes() == first
    assert (out / "steady" / "u0.bin").read_bytes() == u0


def test_missing_and_malformed_config(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert run(["steady", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[params]\nlam = one\n")
    assert run(["steady", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("[params]\ncolour = 3\n")
    assert run(["steady", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("no section here\n")
    assert run(["steady", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_invalid_parameters_and_overrides(tmp_path, cfg, capsys):
    out = tmp_path / "o"
    assert run(["steady", "--config", str(cfg), "--out", str(out), "--set", "params.lam=-1"]) == 2
    assert "nonnegative" in capsys.readouterr().err
    assert run(["steady", "--config", str(cfg), "--out", str(out), "--set", "lam=1"]) == 2
    assert run(["steady", "--config", str(cfg), "--out", str(out), "--set", "params.lam=0.5"]) == 0
    assert _json(out / "summary.json")["lambda"] == 0.5


def test_unknown_subcommand():
    assert run(["frobnicate"]) == 64


def test_solver_failure_exit_code(tmp_path, cfg):
    args = ["steady", "--config", str(cfg), "--out", str(tmp_path / "o"),
            "--set", "params.lam=30", "--set", "solver.max_iter=1"]
    assert run(args) == 3


def test_output_dir_from_environment(tmp_path, cfg, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert run(["thresholds", "--config", str(cfg)]) == 0
    d = _json(tmp_path / "env" / "thresholds.json")
    assert d["ordered"] and d["H1"]["ok"]


def test_resonance_table_with_zero_varpi(tmp_path, cfg):
    out = tmp_path / "o"
    args = ["resonance", "--config", str(cfg), "--out", str(out), "--set", "resonance.k_max=3",
            "--set", "resonance.varpi=0, 0.5", "--set", "resonance.zeta0=1.0"]
    assert run(args) == 0
    rows = list(csv.DictReader(io.StringIO((out / "resonance.csv").read_text())))
    assert len(rows) == 6
    res = [r for r in rows if r["k"] == "1" and float(r["varpi"]) == 0.0][0]
    assert float(res["sigma_min"]) == 0.0 and res["resonant"] == "1"
    assert all(float(r["sigma_min"]) > 0 for r in rows if float(r["varpi"]) > 0)


def test_spectrum_evolve_periodic(tmp_path, cfg):
    out = tmp_path / "o"
    base = ["--config", str(cfg), "--out", str(out)]
    assert run(["spectrum"] + base + ["--set", "spectrum.shifts_im=0, 5"]) == 0
    sp = _json(out / "spectrum.json")
    assert sp["count"] >= 6 and sp["least_stable"][0] > 0
    assert run(["evolve"] + base + ["--set", "evolve.T=0.5", "--set", "evolve.dt=0.05"]) == 0
    ev = _json(out / "evolve.json")
    assert ev["steps"] == 10 and (out / "energy.csv").read_text().startswith("t,E,")
    assert run(["periodic"] + base + ["--set", "periodic.k_trunc=2"]) == 0
    pr = _json(out / "periodic.json")
    assert pr["trivial"] and pr["norm"] < 1e-8


def test_pipeline_report(tmp_path):
    cfgp = tmp_path / "p.cfg"
    cfgp.write_text("[mesh]\nbox = -6, 3, -3, 3\n[branch]\neps = -0.02, -0.01, 0.01, 0.02\nk_trunc = 4\n")
    out = tmp_path / "o"
    assert run(["pipeline", "--config", str(cfgp), "--out", str(out)]) == 0
    rep = _json(out / "report.json")
    assert set(rep) >= {"steady", "thresholds", "hopf", "branch", "config_hash", "version"}
    assert abs(rep["hopf"]["nu0"][0]) <= 1e-8
    assert len(rep["branch"]["points"]) == 4
    assert all(p["residuals"]["full_periodic"] < 1e-6 for p in rep["branch"]["points"])
    assert _json(out / "branch.json")["config_hash"] == rep["config_hash"]
