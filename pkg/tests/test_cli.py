import json
import math
import subprocess
import sys

import pytest

from kirkwood.cli import main

SMALL = {"mc_per_term": 5000, "samples": 3000, "inner": 200, "count_mc": 20000, "kernel_pairs": 2000,
         "kernel_inner": 200, "kernel_queries": 5, "nodes": 16, "probes": 5}


def write_config(tmp_path, **over):
    cfg = {"beta": 1.0, "z": 0.2, "dim": 1, "box": {"lo": [0], "hi": [1]},
           "potential": {"kind": "hard_core", "r": 0.5}, "budgets": dict(SMALL), "seed": 0}
    cfg.update(over)
    p = tmp_path / "model.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    lines = [l for l in out.splitlines() if l.strip()]
    return code, (json.loads(lines[-1]) if lines else None), err


def test_z0(tmp_path, capsys):
    code, res, _ = run(capsys, "z0", "--config", write_config(tmp_path))
    assert code == 0
    assert res["z0"]["value"] == pytest.approx(1 / math.e)


def test_xi_and_theta(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, res, _ = run(capsys, "xi", "--config", cfg, "--z", "-0.2")
    assert code == 0 and res["xi"]["value"] == pytest.approx(0.805, abs=5e-3)
    code, res, _ = run(capsys, "theta", "--config", cfg, "--x", "0.0")
    assert code == 0
    assert res["minus"]["theta"]["value"] == pytest.approx(-0.18 / 0.805, abs=5e-3)


def test_janossy(tmp_path, capsys):
    code, res, _ = run(capsys, "janossy", "--config", write_config(tmp_path), "--x", "[0.0, 0.6]")
    assert code == 0 and res["janossy"]["value"] == pytest.approx(0.04, abs=1e-3)


def test_solve_ks_writes_theta(tmp_path, capsys):
    code, res, _ = run(capsys, "solve-ks", "--config", write_config(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 0 and res["passed"]
    assert (tmp_path / "o" / "theta").exists()


def test_sample_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "sample", "--config", cfg, "--out", str(a), "--threads", "1")
    run(capsys, "sample", "--config", cfg, "--out", str(b), "--threads", "4")
    assert (a / "sample.csv").read_bytes() == (b / "sample.csv").read_bytes()
    assert (a / "sample.json").read_bytes() == (b / "sample.json").read_bytes()


def test_verify_correlations_and_gnz(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, res, _ = run(capsys, "verify-correlations", "--config", cfg, "--out", str(tmp_path / "c"))
    # the 2-sigma fraction is a noisy verdict at this size; only its wiring is checked here
    assert code == (0 if res["passed"] else 1)
    assert res["pooled"]["forbidden_bins_empty"]
    assert (tmp_path / "c" / "rho2.csv").exists()
    code, res, _ = run(capsys, "verify-gnz", "--config", cfg)
    assert code == 0 and res["kernel_bound"]["asserted"] is False


def test_kernel_bound_flag_fails_on_counterexample(tmp_path, capsys):
    budgets = dict(SMALL, kernel_queries=40)
    code, res, _ = run(capsys, "verify-gnz", "--config", write_config(tmp_path, budgets=budgets),
                       "--check-kernel-bound")
    assert res["kernel_bound"]["violations"] > 0
    assert code == 1


def test_lenard_check(tmp_path, capsys):
    code, res, _ = run(capsys, "lenard-check", "--config", write_config(tmp_path), "--out", str(tmp_path / "l"))
    assert code == 0 and res["passed"]
    assert (tmp_path / "l" / "lenard.json").exists()


def test_multibody_commands(tmp_path, capsys):
    cfg = write_config(tmp_path, potential={"kind": "square_well", "r": 0.3, "epsilon": 0.5, "R": 0.8, "B": 1.0},
                       z=0.02)
    code, res, _ = run(capsys, "multibody-kernel", "--config", cfg, "--x", "0.0", "--xn", "0.4", "--y", "0.5,0.9")
    assert code == 0 and res["relative_error"] <= 1e-12
    tri = {"pair": {"kind": "hard_core", "r": 0.5}, "triplet": {"type": "finite_range", "amplitude": 1.0, "R": 1.0}}
    cfg2 = write_config(tmp_path, multibody=tri, budgets=dict(SMALL, assumed_norm=2.0, nodes=8))
    code, res, _ = run(capsys, "multibody-solve", "--config", cfg2)
    assert code == 0 and res["passed"]


def test_usage_errors(tmp_path, capsys):
    assert run(capsys, "z0", "--config", str(tmp_path / "missing.json"))[0] == 2
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "z0", "--config", write_config(tmp_path, budgets={"nope": 1}))[0] == 2
    code, _, err = run(capsys, "janossy", "--config", write_config(tmp_path, z=0.5), "--x", "0.1")
    assert code == 2 and "OutsideDisk" in err
    assert run(capsys, "multibody-solve", "--config", write_config(tmp_path))[0] == 2
    sw = {"kind": "square_well", "r": 0.3, "epsilon": 0.5, "R": 0.8, "B": 1.0}
    assert run(capsys, "verify-gnz", "--config", write_config(tmp_path, potential=sw, z=0.02))[0] == 2


def test_override_disk_check(tmp_path, capsys):
    code, res, _ = run(capsys, "janossy", "--config", write_config(tmp_path, z=0.5), "--x", "0.1",
                       "--override-disk-check")
    assert code == 0


@pytest.mark.slow
def test_report_and_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "kirkwood.cli", "report", "--config", cfg, "--out",
                           str(tmp_path / "r")], capture_output=True, text=True)
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    assert proc.returncode == (0 if res["passed"] else 1), proc.stderr
    assert res["ruelle"]["passed"] and res["lenard"]["passed"] and res["solve_ks"]["residual"] < 1e-8
    assert (tmp_path / "r" / "report.json").exists()
