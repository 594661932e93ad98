import csv
import json

import numpy as np
import pytest
import yaml

from vppmav import cli, config
from vppmav.actuator import MotorModel, PropellerModel, synthetic_bench, write_bench_csv, write_drag_csv
from vppmav.dynamics import DivergenceError
from vppmav.evaluate import EST_COLUMNS, TRAJ_COLUMNS

SMALL = ["--task", "hover", "--setup", "All", "--seed", "1", "--envs", "16", "--epochs", "2"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", *SMALL, "--out", str(out / "a")]) == 0
    return out / "a"


def test_train_writes_artifacts(trained):
    for name in ("policy.npz", "curves.csv", "config.yaml"):
        assert (trained / name).exists()
    snap = yaml.safe_load((trained / "config.yaml").read_text())
    assert snap["run"]["num_envs"] == 16 and snap["run"]["seed"] == 1


def test_train_same_seed_identical_curves(trained, tmp_path):
    assert cli.main(["train", *SMALL, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "curves.csv").read_bytes() == (trained / "curves.csv").read_bytes()
    assert (tmp_path / "b" / "policy.npz").read_bytes() == (trained / "policy.npz").read_bytes()


def test_rerun_from_snapshot(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "config.yaml"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "curves.csv").read_bytes() == (trained / "curves.csv").read_bytes()


def test_setup_changes_only_observation_fields():
    class A:
        config = None
        task = seed = envs = epochs = episodes = None
        deployment_mode = False

    a, b = A(), A()
    a.setup, b.setup = "VA", "All"
    ca, cb = cli.resolve(a), cli.resolve(b)

    def flat(d, pre=""):
        out = {}
        for k, v in d.items():
            out.update(flat(v, pre + k + ".") if isinstance(v, dict) else {pre + k: v})
        return out

    fa, fb = flat(ca), flat(cb)
    assert {k for k in fa if fa[k] != fb[k]} == {"run.setup"}
    ea, eb = config.env_config(ca), config.env_config(cb)
    assert ea.setup == "VA" and eb.setup == "All"


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("learner:\n  clip: 1.5\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("learner:\n  no_such_key: 1\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--setup", "XY", "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_divergence_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("non-finite PPO loss")
    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", *SMALL, "--out", str(tmp_path / "d")]) == 3


def test_eval_header_and_outputs(trained, tmp_path, capsys):
    assert cli.main(["eval", str(trained / "policy.npz"), "--episodes", "4", "--out", str(tmp_path / "e")]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# success:")
    assert "crash:" in text.splitlines()[0]
    with open(tmp_path / "e" / "eval.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["episode", "setup", "final_pos_err_m", "final_ang_err_rad", "crashed", "steps"]
    assert len(rows) == 5
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["config_hash_match"] is True


def test_eval_deterministic(trained, tmp_path):
    for d in ("x", "y"):
        assert cli.main(["eval", str(trained / "policy.npz"), "--episodes", "4", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "eval.csv").read_bytes() == (tmp_path / "y" / "eval.csv").read_bytes()


def test_eval_hash_mismatch_warns(trained, tmp_path, capsys, caplog):
    cfg = yaml.safe_load((trained / "config.yaml").read_text())
    cfg["learner"]["clip"] = 0.25
    alt = tmp_path / "alt.yaml"
    alt.write_text(yaml.safe_dump(cfg))
    assert cli.main(["eval", str(trained / "policy.npz"), "--config", str(alt), "--episodes", "2",
                     "--out", str(tmp_path / "m")]) == 0
    assert "hash mismatch" in capsys.readouterr().out
    assert json.loads((tmp_path / "m" / "summary.json").read_text())["config_hash_match"] is False


def test_eval_wrong_setup_is_input_error(trained, tmp_path):
    assert cli.main(["eval", str(trained / "policy.npz"), "--setup", "VA", "--episodes", "2",
                     "--out", str(tmp_path / "w")]) == 2


def test_eval_missing_checkpoint(tmp_path):
    assert cli.main(["eval", str(tmp_path / "nope.npz"), "--out", str(tmp_path / "n")]) == 2


def test_eval_analytic_hover_no_failures(tmp_path):
    assert cli.main(["eval", "analytic", "--task", "hover", "--episodes", "100", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["fail_rate"] == 0.0


def test_export_hover_columns_and_roundtrip(tmp_path):
    assert cli.main(["export", "analytic", "--task", "hover", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "trajectory.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TRAJ_COLUMNS
    data = np.array(rows[1:], dtype=float)
    assert len(data) == 501
    # repr-formatted floats read back exactly
    assert all(repr(float(x)) == x for x in rows[5])
    py = data[:, TRAJ_COLUMNS.index("py")]
    # the PD hover law has no integral term, so the pitch disturbance leaves a small constant sag
    assert np.max(np.abs(py - 1.25)) < 0.02
    assert np.ptp(py[-200:]) < 1e-3


def test_export_deployment_mode_adds_estimate(tmp_path):
    assert cli.main(["export", "analytic", "--task", "hover", "--deployment-mode", "--out", str(tmp_path)]) == 0
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == TRAJ_COLUMNS + EST_COLUMNS


def test_export_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["export", "analytic", "--task", "hover", "--difficulty", "1", "--seed", "3",
                         "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_fit_thrust_exact_recovery(tmp_path, capsys):
    prop, motor = PropellerModel(), MotorModel()
    bench = tmp_path / "bench.csv"
    write_bench_csv(bench, synthetic_bench(prop, motor))
    assert cli.main(["fit", str(bench), "--what", "thrust", "--out", str(tmp_path / "f")]) == 0
    fitted = yaml.safe_load((tmp_path / "f" / "config.yaml").read_text())["actuator"]
    for k in ("k_T", "k_D1", "k_D2", "k_D3"):
        assert fitted["propeller"][k] == pytest.approx(getattr(prop, k), rel=1e-6)
    assert fitted["motor"]["i0"] == pytest.approx(motor.i0, rel=1e-6)
    assert "residual rms" in capsys.readouterr().out


def test_fit_bad_header_exit_2(tmp_path):
    bench = tmp_path / "bench.csv"
    bench.write_text("rpm,a,T,i\n4500,0.1,1,1\n")
    assert cli.main(["fit", str(bench), "--out", str(tmp_path / "f")]) == 2


def test_fit_drag_zero_velocity_exit_2(tmp_path, capsys):
    path = tmp_path / "drag.csv"
    write_drag_csv(path, np.column_stack([np.full(10, 5.0), np.zeros(10), np.zeros(10)]))
    assert cli.main(["fit", str(path), "--what", "drag", "--out", str(tmp_path / "f")]) == 2
    assert "unobservable" in capsys.readouterr().err


def test_bench_smoke(tmp_path, capsys):
    assert cli.main(["bench", "--envs", "64", "--steps", "20", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "physics" in out and "pipeline" in out
    assert "bit-identical across worker counts: True" in out
    assert (tmp_path / "bench.csv").read_text().startswith("mode,backend,num_envs,threads,env_steps_per_s")
