import csv
import math

import numpy as np
import pytest

from mfflow.cli import main

SMALL = """[scenario]
base = {base}
[grid]
n_points = 201
[time]
n_steps = 100
[mc]
n_paths = 2000
[check]
martingale_paths = 400
residual_paths = 2000
residual_n_steps = 50
"""


def rows(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def small(tmp_path, base):
    f = tmp_path / f"{base}.ini"
    f.write_text(SMALL.format(base=base))
    return str(f)


def test_run_fp_pure_diffusion(tmp_path):
    assert main(["run-fp", "--scenario", "pure-diffusion", "--out", str(tmp_path)]) == 0
    norms = rows(tmp_path / "norm_report.csv")
    mass = np.array([float(r["mass"]) for r in norms])
    assert np.abs(mass - mass[0]).max() < 1e-10
    assert (tmp_path / "density_path.csv").exists()
    first = (tmp_path / "norm_report.csv").read_text().splitlines()[0]
    assert first == "# version=0.1.0, seed=20240601, scenario=pure-diffusion"


def test_run_fp_reference_holder_finite(tmp_path):
    assert main(["run-fp", "--config", small(tmp_path, "state-invariant-ref"), "--out", str(tmp_path)]) == 0
    summ = {r["quantity"]: float(r["value"]) for r in rows(tmp_path / "norm_summary.csv")}
    assert math.isfinite(summ["holder_quotient"])


def test_config_errors_exit_3(tmp_path, capsys):
    assert main(["run-fp", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 3
    assert main(["run-fp", "--scenario", "nope", "--out", str(tmp_path)]) == 3
    assert main(["run-fp", "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nbase = pure-diffusion\n[mu]\ndensity = 1*N(7.9, 1)\n")
    assert main(["run-fp", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert "configuration error" in capsys.readouterr().err


def test_kernel_on_state_dependent_exit_3(tmp_path):
    assert main(["run-kernel", "--config", small(tmp_path, "state-dep-drift"), "--out", str(tmp_path)]) == 3


def test_run_kernel(tmp_path):
    cfg = small(tmp_path, "state-invariant-ref")
    assert main(["run-kernel", "--config", cfg, "--out", str(tmp_path), "--snapshot-every", "50"]) == 0
    disc = rows(tmp_path / "kernel_discrepancy.csv")
    assert [float(r["s"]) for r in disc] == [0.0, 0.5, 1.0]
    assert max(float(v) for r in disc for k, v in r.items() if k != "s") < 0.05


def test_run_value(tmp_path, monkeypatch):
    monkeypatch.setenv("MF_THREADS", "2")
    assert main(["run-value", "--config", small(tmp_path, "state-invariant-ref"), "--out", str(tmp_path)]) == 0
    rep = {r["quantity"]: r for r in rows(tmp_path / "value_report.csv")}
    assert set(rep) >= {"V", "dV_dx", "d2V_dx2", "dV_dt", "dV_dmu_pair0"}
    assert len(rows(tmp_path / "dv_dmu.csv")) == 201


def test_verify_constant_phi(tmp_path):
    assert main(["verify", "--scenario", "constant-phi", "--out", str(tmp_path)]) == 0
    summ = {r["check"]: r for r in rows(tmp_path / "verify_summary.csv")}
    assert all(r["status"] == "PASS" for r in summ.values())
    assert float(summ["master_pde_residual"]["value"]) == 0.0
    res = rows(tmp_path / "verify_residual.csv")
    assert all(float(r["residual"]) == 0.0 for r in res)


def test_verify_state_dependent_skips_residual(tmp_path):
    code = main(["verify", "--config", small(tmp_path, "state-dep-drift"), "--out", str(tmp_path)])
    summ = {r["check"]: r for r in rows(tmp_path / "verify_summary.csv")}
    assert summ["master_pde_residual"]["status"] == "SKIPPED"
    assert summ["martingale"]["status"] in ("PASS", "FAIL") and summ["ito_residual"]["status"] in ("PASS", "FAIL")
    assert code == (1 if any(r["status"] == "FAIL" for r in summ.values()) else 0)


def test_verify_is_deterministic(tmp_path):
    cfg = small(tmp_path, "state-invariant-ref")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "--config", cfg, "--out", str(a)]) == main(["verify", "--config", cfg, "--out", str(b)])
    for name in ("verify_summary.csv", "verify_residual.csv", "verify_martingale.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override(tmp_path):
    assert main(["run-fp", "--scenario", "pure-diffusion", "--seed", "11", "--out", str(tmp_path)]) == 0
    assert "seed=11," in (tmp_path / "density_path.csv").read_text().splitlines()[0]


def test_convergence_command(tmp_path):
    cfg = tmp_path / "conv.ini"
    cfg.write_text(SMALL.format(base="state-invariant-ref") + "targets = density_derivative, state_derivative\n")
    assert main(["convergence", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    slopes = rows(tmp_path / "convergence_slopes.csv")
    assert [r["status"] for r in slopes] == ["PASS", "PASS"]
    assert len(rows(tmp_path / "convergence_errors.csv")) == 8


def test_bad_threads(tmp_path):
    assert main(["run-fp", "--scenario", "pure-diffusion", "--threads", "0", "--out", str(tmp_path)]) == 3
