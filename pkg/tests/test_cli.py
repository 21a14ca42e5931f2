import csv
import json
import os

import numpy as np
import pytest

from steinflow.cli_tool import dispatch

CONFIG = """
seed = 7
n_particles = 20
target.family = "gaussian"
target.mean = [0.0]
target.cov = [1.0]
kernel.family = "rbf"
kernel.bandwidth = 1.0
init.mean = [3.0]
init.cov = [1.0]
schedule.mode = "constant"
schedule.base = 0.05
run.max_iter = 5
flow.dt = 0.01
flow.t_end = 0.05
langevin.epsilon = 0.01
langevin.n_steps = 5
output.record_every = 1
output.thinning = 2
"""


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_no_arguments_is_a_usage_error(capsys):
    assert dispatch([]) == 2
    assert "usage" in capsys.readouterr().err


def test_version(capsys):
    assert dispatch(["--version"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("steinflow ")
    assert "numpy" in out and "scipy" in out


def test_unknown_subcommand():
    assert dispatch(["sample"]) == 2


def test_run_writes_outputs(write_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert dispatch(["run", "--config", write_config(CONFIG), "--out", str(out), "--track-density", "--svg"]) == 0
    assert capsys.readouterr().out.strip() == str(out / "trajectory.csv")

    rows = _rows(out / "trajectory.csv")
    assert rows[0] == ["iteration", "epsilon", "ksd", "kl"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4", "5"]
    assert float(rows[1][1]) == 0.0
    assert all(float(r[1]) == 0.05 for r in rows[2:])
    assert all(r[3] != "" for r in rows[1:])
    assert float(rows[-1][2]) < float(rows[1][2])

    for step in (0, 2, 4, 5):
        particles = _rows(out / f"particles_{step}.csv")
        assert particles[0] == ["x0"]
        assert len(particles) == 21
    assert not (out / "particles_1.csv").exists()

    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 7
    assert meta["source_config"] == CONFIG
    assert meta["overrides"] == {"output.track_density": True}
    assert "output.track_density = true" in meta["config"].splitlines()
    assert meta["command"] == "run"
    assert meta["values"]["run.max_iter"] == 5
    assert set(meta["versions"]) >= {"numpy", "scipy", "python"}
    assert (out / "chart.svg").read_text().startswith("<?xml")


def test_run_is_reproducible(write_config, tmp_path):
    path = write_config(CONFIG)
    dispatch(["run", "--config", path, "--out", str(tmp_path / "a")])
    dispatch(["run", "--config", path, "--out", str(tmp_path / "b")])
    dispatch(["run", "--config", path, "--out", str(tmp_path / "c"), "--seed", "8"])
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert a != (tmp_path / "c" / "trajectory.csv").read_bytes()


def test_meta_config_reproduces_an_overridden_run(write_config, tmp_path):
    dispatch(["run", "--config", write_config(CONFIG), "--out", str(tmp_path / "a"), "--seed", "8",
              "--track-density"])
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["seed"] == 8
    assert meta["overrides"] == {"seed": 8, "output.track_density": True}

    rerun = write_config(meta["config"], "rerun.toml")
    assert dispatch(["run", "--config", rerun, "--out", str(tmp_path / "b")]) == 0
    for name in ("trajectory.csv", "particles_4.csv", "particles_5.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "overrides" not in json.loads((tmp_path / "b" / "meta.json").read_text())


def test_thread_count_does_not_change_output(write_config, tmp_path, monkeypatch):
    path = write_config(CONFIG.replace("n_particles = 20", "n_particles = 600"))
    for threads in ("1", "2", "8"):
        monkeypatch.setenv("STEINFLOW_THREADS", threads)
        assert dispatch(["run", "--config", path, "--out", str(tmp_path / threads)]) == 0
    for name in ("trajectory.csv", "particles_5.csv"):
        single = (tmp_path / "1" / name).read_bytes()
        assert single == (tmp_path / "2" / name).read_bytes()
        assert single == (tmp_path / "8" / name).read_bytes()


def test_flow(write_config, tmp_path):
    out = tmp_path / "flow"
    assert dispatch(["flow", "--config", write_config(CONFIG), "--out", str(out), "--t-end", "0.1",
                     "--dt", "0.02", "--track-density"]) == 0
    rows = _rows(out / "trajectory.csv")
    assert rows[0] == ["time", "epsilon", "ksd", "kl"]
    assert [r[0] for r in rows[1:]] == ["0.0", "0.02", "0.04", "0.06", "0.08", "0.1"]
    kl = [float(r[3]) for r in rows[1:]]
    assert kl[-1] < kl[0]
    assert (out / "particles_5.csv").exists()
    assert json.loads((out / "meta.json").read_text())["values"]["flow.t_end"] == 0.1


def test_langevin(write_config, tmp_path):
    out = tmp_path / "langevin"
    assert dispatch(["langevin", "--config", write_config(CONFIG), "--out", str(out)]) == 0
    rows = _rows(out / "trajectory.csv")
    assert rows[0][0] == "time"
    assert len(rows) == 7
    assert len(_rows(out / "particles_5.csv")) == 21


def test_langevin_time_override(write_config, tmp_path):
    out = tmp_path / "langevin"
    assert dispatch(["langevin", "--config", write_config(CONFIG), "--out", str(out),
                     "--t-end", "0.1", "--dt", "0.02"]) == 0
    rows = _rows(out / "trajectory.csv")
    np.testing.assert_allclose(float(rows[-1][0]), 0.1)
    meta = json.loads((out / "meta.json").read_text())
    assert meta["overrides"] == {"langevin.epsilon": 0.02, "langevin.n_steps": 5}
    assert "langevin.n_steps = 5" in meta["config"].splitlines()


def test_ksd_prints_report(write_config, tmp_path, capsys):
    points = tmp_path / "points.csv"
    points.write_text("x0\n-1.0\n0.0\n1.0\n")
    assert dispatch(["ksd", "--config", write_config(CONFIG), "--points", str(points),
                     "--estimator", "ustat"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["estimator"] == "ustat"
    assert report["n_points"] == 3
    assert report["bandwidth"] == 1.0
    assert np.isfinite(report["value"])


def test_verify_selected_check(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert dispatch(["verify", "--only", "langevin_rate_identity", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("PASS langevin_rate_identity")
    report = json.loads(out.read_text())
    assert [r["name"] for r in report] == ["langevin_rate_identity"]
    assert report[0]["passed"] is True


def test_verify_failure_exit_code(write_config, capsys):
    path = write_config("verify.fixed_point_shift = 2.0\nverify.fixed_point_particles = 500")
    assert dispatch(["verify", "--config", path, "--only", "fixed_point"]) == 1
    assert capsys.readouterr().out.startswith("FAIL fixed_point")


def test_verify_rejects_unknown_check():
    assert dispatch(["verify", "--only", "no_such_check"]) == 2


@pytest.mark.parametrize("text", [
    "kernel.bandwidth = -1",
    "target.cov = [-1.0]",
    "seed = ",
])
def test_bad_config_exits_with_error(write_config, tmp_path, capsys, text):
    assert dispatch(["run", "--config", write_config(text), "--out", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().out.startswith("Error:")
    assert not os.path.exists(tmp_path / "x")


def test_missing_config_file(tmp_path, capsys):
    assert dispatch(["run", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 1
    assert "Error:" in capsys.readouterr().out
