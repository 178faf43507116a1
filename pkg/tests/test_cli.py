import json
import math
import shutil
import subprocess

import pytest

from dpfilter.cli import main
from dpfilter.privacy import PrivacyBudget

TRAFFIC = {"A": [[1, 1], [0, 1]], "B": [[0.5, 0], [1, 0]], "C": [[1, 0]], "D": [[0, 1]]}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data, indent=2))
    return str(p)


def test_calibrate(capsys, tmp_path):
    code, out, _ = run(capsys, "calibrate", "--epsilon", str(math.log(2)), "--delta", "0.05",
                       "--out", str(tmp_path))
    assert code == 0
    data = json.loads(out)
    assert data["kappa"] == pytest.approx(2.6457, abs=5e-5)
    assert json.loads((tmp_path / "summary.json").read_text()) == data


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = write_config(tmp_path, {"epsilon": 1.0, "delta": 0.05, "sensitivity": 2.0})
    code, out, _ = run(capsys, "calibrate", "--config", cfg, "--epsilon", "0.5")
    assert code == 0
    data = json.loads(out)
    b = PrivacyBudget(0.5, 0.05)
    assert data["sigma"] == pytest.approx(2.0 * b.kappa, rel=1e-12)


def test_verify_dp(capsys):
    code, out, _ = run(capsys, "verify-dp", "--epsilon", "1", "--delta", "0.05")
    assert code == 0 and json.loads(out)["private"] is True
    code, out, _ = run(capsys, "verify-dp", "--epsilon", "1", "--delta", "0.05", "--sigma", "0.5")
    assert code == 0 and json.loads(out)["private"] is False


def test_norms(capsys, tmp_path):
    cfg = write_config(tmp_path, {"system": {"A": [[0.5]], "B": [[1]], "C": [[1]], "D": [[0]]},
                                  "lmi": True})
    code, out, _ = run(capsys, "norms", "--config", cfg)
    assert code == 0
    data = json.loads(out)
    assert data["h2"] == pytest.approx(math.sqrt(1 / 0.75), rel=1e-9)
    assert data["hinf"] == pytest.approx(2.0, rel=1e-6)
    assert data["hinf_lmi"] == pytest.approx(2.0, rel=1e-4)


def test_kalman(capsys, tmp_path):
    cfg = write_config(tmp_path, {"system": TRAFFIC, "L": [[0, 1]]})
    code, out, _ = run(capsys, "kalman", "--config", cfg)
    assert code == 0
    data = json.loads(out)
    assert data["predicted_mse"] == pytest.approx(2.0, rel=1e-9)
    assert [g[0] for g in data["G"]] == pytest.approx([1.25, 0.5])


def test_synth_and_infeasible(capsys, tmp_path):
    base = {"system": TRAFFIC, "L": [[0, 0.005]], "n_participants": 200, "rho": 100.0,
            "epsilon": math.log(3), "delta": 0.05}
    code, out, _ = run(capsys, "synth", "--config", write_config(tmp_path, base))
    assert code == 0
    data = json.loads(out)
    assert data["kind"] == "unstable" and data["verification"]["passed"]
    code, _, err = run(capsys, "synth", "--config",
                       write_config(tmp_path, {**base, "lambda_cap": 1e-9}, "bad.json"))
    assert code == 2
    assert "numerical failure" in err


def test_malformed_config_exit_1(capsys, tmp_path):
    p = tmp_path / "sim.json"
    p.write_text('{\n  "seed": 1,\n  "horizon": -5\n}\n')
    code, _, err = run(capsys, "simulate", "--config", str(p), "--out", str(tmp_path))
    assert code == 1
    assert "line 3" in err and "horizon" in err
    code, _, err = run(capsys, "calibrate", "--epsilon", "-1", "--delta", "0.05")
    assert code == 1


def test_simulate_twice_identical(capsys, tmp_path):
    cfg = write_config(tmp_path, {"n_participants": 10, "horizon": 30, "trials": 3, "seed": 5,
                                  "schemes": ["compensated-input", "output-kalman"]})
    outs = []
    for k, workers in enumerate(("1", "2")):
        d = tmp_path / f"run{k}"
        code, _, _ = run(capsys, "simulate", "--config", cfg, "--out", str(d),
                         "--workers", workers)
        assert code == 0
        outs.append(((d / "traces.csv").read_bytes(), (d / "summary.json").read_bytes()))
    assert outs[0] == outs[1]


@pytest.mark.skipif(shutil.which("dpfilter") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["dpfilter", "calibrate", "--epsilon", "1", "--delta", "0.5"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["kappa"] == pytest.approx(1 / math.sqrt(2), rel=1e-12)
