import json
import subprocess
import sys

import numpy as np
import pytest

from kinspray.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

SMALL = {"nx": 32, "nv": 32, "horizon": 0.02, "dt_max": 2e-3, "epsilon": 0.5, "epsilons": [0.5, 0.25],
         "runs": 4}


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_driver_info(capsys):
    assert main(["driver-info"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "nu = (0.5, 0.5)" in out
    assert "gamma = 1" in out
    assert "M^-1 I check PASS" in out


def test_driver_info_preset(capsys):
    assert main(["driver-info", "--driver", "three_state"]) == EXIT_OK
    assert "nu = (0.3, 0.3, 0.4)" in capsys.readouterr().out


def test_coeffs_outputs(tmp_path, cfg_file):
    out = tmp_path / "c"
    assert main(["coeffs", "--config", str(cfg_file), "--out-dir", str(out)]) == EXIT_OK
    data = np.loadtxt(out / "coeffs.csv", delimiter=",", skiprows=1)
    assert data.shape == (32, 3)
    meta = json.loads((out / "coeffs.json").read_text())
    assert meta["n_modes"] == 1 and meta["nx"] == 32
    k = np.loadtxt(out / "kernel.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(k, k.T)


@pytest.mark.parametrize("model", ["kinetic", "spde"])
def test_simulate(tmp_path, cfg_file, model):
    out = tmp_path / "s"
    assert main(["simulate", "--config", str(cfg_file), "--model", model, "--run-id", "2",
                 "--out-dir", str(out)]) == EXIT_OK
    rho = np.loadtxt(out / f"{model}_rho.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rho.shape[1] == 33
    np.testing.assert_allclose(rho[:, 1:].mean(1), 1.0, atol=1e-10)
    diag = json.loads((out / f"{model}_diagnostics.json").read_text())
    assert diag["run_id"] == 2 and diag["model"] == model


def test_ensemble_and_compare(tmp_path, cfg_file, capsys):
    out = tmp_path / "e"
    assert main(["ensemble", "--config", str(cfg_file), "--out-dir", str(out)]) == EXIT_OK
    assert main(["ensemble", "--config", str(cfg_file), "--model", "spde",
                 "--out-dir", str(out)]) == EXIT_OK
    files = sorted(out.glob("summary_kinetic_eps*.json"))
    assert len(files) == 2
    s = json.loads(files[0].read_text())
    assert s["n"] == 4 and set(s["stats"]) == {"sin2pix", "cos2pix", "cos4pix"}
    capsys.readouterr()
    code = main(["compare", "--kinetic", *map(str, files), "--spde", str(out / "summary_spde.json"),
                 "--out-dir", str(out)])
    assert code in (EXIT_OK, EXIT_FAIL)
    rep = json.loads((out / "comparison.json").read_text())
    assert len(rep["rows"]) == 3 * 2 * 2
    assert ("PASS" if rep["passed"] else "FAIL") in capsys.readouterr().out
    code = main(["compare", "--kinetic", *map(str, files), "--spde", str(out / "summary_spde.json"),
                 "--tolerance", "0", "--out-dir", str(out)])
    assert code == EXIT_FAIL


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["nonsense"]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "config file not found" in err and "Config file: one JSON object" in err
    assert main(["compare", "--kinetic", "a.json", "--spde", "b.json"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epsilon": 3.0}))
    assert main(["simulate", "--config", str(bad)]) == EXIT_USAGE
    assert main(["driver-info", "--driver", "no_such_driver"]) == EXIT_USAGE


def test_invalid_driver_exit_code(tmp_path, capsys):
    p = tmp_path / "d.json"
    p.write_text(json.dumps({"driver": {"states": [{}, {}], "transition": [[1, 0], [0, 1]]}}))
    assert main(["driver-info", "--config", str(p)]) == EXIT_FAIL
    assert "ReducibleChain" in capsys.readouterr().err


def test_verify_single_check(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--quick", "--only", "1", "--out-dir", str(out)]) == EXIT_OK
    assert "PASS [1]" in capsys.readouterr().out
    report = json.loads((out / "verify.json").read_text())
    assert report["checks"][0]["id"] == 1


def test_console_script():
    r = subprocess.run([sys.executable, "-m", "kinspray.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "driver-info" in r.stdout and "spde_scheme" in r.stdout


def test_outputs_are_byte_identical(tmp_path, cfg_file):
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(cfg_file), "--seed", "4",
                     "--out-dir", str(tmp_path / d)]) == EXIT_OK
        assert main(["ensemble", "--config", str(cfg_file), "--seed", "4",
                     "--out-dir", str(tmp_path / d)]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
