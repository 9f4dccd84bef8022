import json
import subprocess
import sys

import numpy as np
import pytest

from deltamri import cli, container
from deltamri.solver import SolverError

FAST = ["--bb-iters", "10", "--tcs-iters", "10"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def value(out, key):
    for line in out.splitlines():
        if line.startswith(key + " "):
            return line.split(" ", 1)[1]
    raise KeyError(key)


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "sc"
    assert cli.main(["simulate", "--shape", "48x48", "--seed", "1", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def clean_scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "clean"
    assert cli.main(["simulate", "--shape", "48x48", "--noise-frac", "0", "--out", str(d)]) == 0
    return d


def test_simulate_writes_bundle(scenario):
    names = {p.name for p in scenario.iterdir()}
    assert {"r1.dmri", "r1_hat.dmri", "r2.dmri", "phi2.dmri", "v_true.dmri",
            "manifest.json"} <= names
    manifest = json.loads((scenario / "manifest.json").read_text())
    assert manifest["residual"] <= 1e-2
    assert container.read(scenario / "v_true.dmri", expect="vector").shape == (48, 48, 2)


def test_simulate_prints_residual(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--shape", "32x32", "--out", tmp_path / "s")
    assert code == 0 and float(value(out, "residual")) <= 1e-2


def test_missing_shape_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--out", tmp_path / "s")
    assert code == 2
    assert "usage:" in err and "--shape" in err


def test_identity_flags_give_identical_files(tmp_path, capsys):
    code, _, _ = run(capsys, "simulate", "--shape", "24x24x16", "--theta-deg", "0,0,0",
                     "--t", "0,0,0", "--dvf-peak", "0", "--out", tmp_path / "id")
    assert code == 0
    assert (tmp_path / "id/r1.dmri").read_bytes() == (tmp_path / "id/r2.dmri").read_bytes()


def test_folding_field_is_construction_failure(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--shape", "16x16x16", "--out", tmp_path / "s")
    assert code == 3 and "scenario construction failed" in err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"shape": "32x32", "pct": 20, "seed": 4}))
    code, out, _ = run(capsys, "mask", "--config", cfg, "--out", tmp_path / "m.dmri")
    assert code == 0 and value(out, "selected").startswith("205 ")
    code, out2, _ = run(capsys, "mask", "--config", cfg, "--pct", "10",
                        "--out", tmp_path / "m2.dmri")
    assert value(out2, "selected").startswith("102 ")
    assert value(out, "config_hash") != value(out2, "config_hash")
    mask = container.read(tmp_path / "m.dmri", expect="mask")
    assert mask.dtype == bool and mask.sum() == 205


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"shape": "32x32", "colour": "red"}))
    code, _, err = run(capsys, "mask", "--config", cfg)
    assert code == 2 and "colour" in err


def test_bad_values_rejected(tmp_path, capsys):
    assert run(capsys, "mask", "--shape", "32by32")[0] == 2
    assert run(capsys, "mask", "--shape", "32x32", "--pct", "lots")[0] == 2
    assert run(capsys, "simulate", "--shape", "32x32", "--theta-deg", "50",
               "--out", tmp_path / "x")[0] == 2


def test_env_seed_overrides_config(tmp_path, capsys, monkeypatch):
    base = run(capsys, "mask", "--shape", "32x32", "--out", tmp_path / "a.dmri")[1]
    monkeypatch.setenv("DMRI_SEED", "7")
    env = run(capsys, "mask", "--shape", "32x32", "--out", tmp_path / "b.dmri")[1]
    flag = run(capsys, "mask", "--shape", "32x32", "--seed", "0", "--out", tmp_path / "c.dmri")[1]
    assert value(base, "config_hash") != value(env, "config_hash")
    assert value(base, "config_hash") == value(flag, "config_hash")


def test_zidft_full_sampling_is_exact(clean_scenario, tmp_path, capsys):
    code, out, _ = run(capsys, "reconstruct", "--scenario", clean_scenario, "--method", "zidft",
                       "--pct", "100", "--out", tmp_path / "z")
    assert code == 0 and abs(float(value(out, "epsilon"))) <= 1e-10


def test_tcs_requires_alignment(scenario, tmp_path, capsys):
    code, _, err = run(capsys, "reconstruct", "--scenario", scenario, "--method", "tcs",
                       "--out", tmp_path / "t")
    assert code == 2 and "aligned" in err and "--rigid" in err


def test_delta_then_tcs(scenario, tmp_path, capsys):
    code, out, _ = run(capsys, "reconstruct", "--scenario", scenario, "--method", "delta",
                       "--pct", "10", *FAST, "--out", tmp_path / "d")
    assert code == 0
    for name in ("r2_hat.dmri", "v_hat.dmri", "rigid.json", "trace.json", "mask.dmri",
                 "measurement.dmri"):
        assert (tmp_path / "d" / name).exists()
    meas = container.read(tmp_path / "d/measurement.dmri", expect="complex")
    assert meas.shape == (230, 1)
    code, out2, _ = run(capsys, "reconstruct", "--scenario", scenario, "--method", "tcs",
                        "--rigid", tmp_path / "d/rigid.json", *FAST, "--out", tmp_path / "t")
    assert code == 0 and (tmp_path / "t/x2_hat.dmri").exists()
    code, out3, _ = run(capsys, "evaluate", "--scenario", scenario,
                        "--estimate", tmp_path / "d/r2_hat.dmri")
    assert code == 0
    assert float(value(out3, "epsilon")) == pytest.approx(float(value(out, "epsilon")), rel=1e-5)


def test_solver_failure_exit_code(scenario, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise SolverError("non-finite cost or gradient")
    monkeypatch.setattr(cli, "reconstruct_delta", boom)
    code, _, err = run(capsys, "reconstruct", "--scenario", scenario, "--out", tmp_path / "d")
    assert code == 4 and "non-finite" in err


def test_sweep_outputs(scenario, tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--scenario", scenario, "--pcts", "1,2,5,10,20",
                       "--methods", "delta,tcs,zidft", "--seeds", "1,2,3", "--bb-iters", "3",
                       "--tcs-iters", "3", "--out", tmp_path / "sw")
    assert code == 0
    lines = (tmp_path / "sw/sweep.csv").read_text().splitlines()
    assert lines[0] == "method,pct,seed,epsilon,wall_time_s,config_hash"
    rows = [ln for ln in lines[1:] if not ln.startswith("#")]
    assert len(rows) == 45
    import matplotlib.image as mpimg
    img = mpimg.imread(tmp_path / "sw/sweep.png")
    assert img.shape[1] >= 640 and img.shape[0] >= 480


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "deltamri.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("simulate", "mask", "reconstruct", "evaluate", "sweep"):
        assert sub in res.stdout
