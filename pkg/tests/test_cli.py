import json
import subprocess
import sys

import pytest

from skiplab.cli import canonical, main


@pytest.fixture
def runs(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("RUNS_DIR", str(root))
    return root


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


SKIP = {
    "model": "skipnet",
    "d": 3,
    "m": 2,
    "L": 10,
    "init_seed": 0,
    "dataset": {"n": 4, "seed": 0, "compute_lambda": False},
    "train": {"steps": 50, "record_every": 10},
}


def only_run(root):
    dirs = [p for p in root.iterdir()]
    assert len(dirs) == 1 and not dirs[0].name.startswith(".tmp")
    return dirs[0]


def test_train_outputs(tmp_path, runs):
    assert main(["train", "--config", str(write(tmp_path, SKIP))]) == 0
    out = only_run(runs)
    assert {p.name for p in out.iterdir()} == {
        "config.json", "dataset.csv", "dataset.json", "trajectory.csv", "diagnostics.json", "final_params.json"
    }
    assert out.name.startswith("train-")
    assert (out / "trajectory.csv").read_text().startswith("step,time,risk,max_dev_a")
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["status"] == "budget" and diag["trajectory"]["lambda_hat"] > 0


def test_rerun_from_config_copy_is_byte_identical(tmp_path, runs):
    main(["train", "--config", str(write(tmp_path, SKIP))])
    first = only_run(runs)
    saved = {p.name: p.read_bytes() for p in first.iterdir()}
    copy = tmp_path / "copy.json"
    copy.write_bytes((first / "config.json").read_bytes())
    assert main(["train", "--config", str(copy)]) == 0
    again = only_run(runs)
    assert {p.name: p.read_bytes() for p in again.iterdir()} == saved


def test_divergence_exit_code(tmp_path, runs):
    doc = dict(SKIP, train={"steps": 100, "eta_lambda_multiple": 1e7})
    assert main(["train", "--config", str(write(tmp_path, doc))]) == 2
    diag = json.loads((only_run(runs) / "diagnostics.json").read_text())
    assert diag["status"] == "diverged" and "step size" in diag["message"]


def test_missing_dataset_leaves_nothing(tmp_path, runs):
    doc = dict(SKIP, dataset={"path": "nowhere.csv"})
    assert main(["train", "--config", str(write(tmp_path, doc))]) == 3
    assert not runs.exists() or not any(runs.iterdir())
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 3


def test_dataset_path_is_relative_to_config(tmp_path, runs):
    assert main(["train", "--config", str(write(tmp_path, SKIP))]) == 0
    ds_path = only_run(runs) / "dataset.csv"
    sub = tmp_path / "cfgs"
    sub.mkdir()
    rel = "../" + ds_path.relative_to(tmp_path).as_posix()
    doc = dict(SKIP, dataset={"path": rel}, name="fromfile")
    assert main(["train", "--config", str(write(sub, doc))]) == 0


def test_other_models_train(tmp_path, runs):
    for model in ("rf", "resnet", "resnet-frozenV"):
        doc = dict(SKIP, model=model, name=model)
        if model != "rf":
            doc["train"] = {"eta": 0.05, "eta_rule": "explicit", "steps": 20}
        assert main(["train", "--config", str(write(tmp_path, doc))]) == 0
    bad = dict(SKIP, model="resnet", name="bad")
    assert main(["train", "--config", str(write(tmp_path, bad))]) == 3
    assert main(["train", "--config", str(write(tmp_path, dict(SKIP, model="mlp")))]) == 3


def test_verify(tmp_path, runs):
    doc = dict(SKIP, L=100, d=4, m=5, dataset={"n": 6, "seed": 0, "compute_lambda": False},
               verify={"c": 1.0, "n_probes": 10, "n_gradient_probes": 5})
    assert main(["verify", "--config", str(write(tmp_path, doc))]) == 0
    rep = json.loads((only_run(runs) / "diagnostics.json").read_text())
    assert len(rep["reports"]) == 13 and rep["all_pass"]


def test_verify_theta0_only(tmp_path, runs):
    doc = dict(SKIP, verify={"theta0_only": True, "checks": ["forward", "backward"], "n_probes": 3})
    assert main(["verify", "--config", str(write(tmp_path, doc))]) == 0
    rep = json.loads((only_run(runs) / "diagnostics.json").read_text())
    assert all(r["lhs_max"] == 0.0 for r in rep["reports"])


def test_verify_gate_violation(tmp_path, runs):
    doc = dict(SKIP, L=3, verify={"c": 1.0})
    assert main(["verify", "--config", str(write(tmp_path, doc))]) == 3
    assert not runs.exists() or not any(runs.iterdir())


def test_couple(tmp_path, runs):
    doc = dict(SKIP, depths=[8, 16], couple={"n_records": 5})
    assert main(["couple", "--config", str(write(tmp_path, doc))]) == 0
    out = only_run(runs)
    for L in (8, 16):
        rows = (out / f"coupling_L{L}.csv").read_text().splitlines()
        assert rows[0] == "t,a_gap,f_gap_theta,f_gap_traj"
        assert [float(v) for v in rows[1].split(",")] == [0.0, 0.0, 0.0, 0.0]
    bad = dict(doc, rf_init_seed=1)
    assert main(["couple", "--config", str(write(tmp_path, bad, "bad.json"))]) == 3


def test_couple_resnet(tmp_path, runs):
    doc = dict(SKIP, model="resnet", d=5, m=1, depths=[2, 10], couple={"steps": 40, "n_records": 4})
    assert main(["couple", "--config", str(write(tmp_path, doc))]) == 0
    assert {p.name for p in only_run(runs).iterdir()} >= {"coupling_L2.csv", "coupling_L10.csv"}


def test_sweep(tmp_path, runs):
    doc = dict(SKIP, sweep={"depths": [8, 16], "seeds": [0, 1], "n_records": 4})
    path = write(tmp_path, doc)
    assert main(["sweep", "--config", str(path)]) == 0
    out = only_run(runs)
    text = (out / "summary.csv").read_text()
    assert len(text.splitlines()) == 5
    assert set(json.loads((out / "fits.json").read_text())) >= {"sup_f_gap_theta_vs_L", "a_gap_rate_vs_L"}
    assert main(["sweep", "--config", str(path), "--jobs", "2"]) == 0
    assert (only_run(runs) / "summary.csv").read_text() == text


def test_empty_sweep(tmp_path, runs):
    doc = dict(SKIP, sweep={"depths": [], "seeds": [0]})
    assert main(["sweep", "--config", str(write(tmp_path, doc))]) == 3


def test_seed_override_changes_run(tmp_path, runs):
    path = write(tmp_path, SKIP)
    main(["train", "--config", str(path)])
    main(["train", "--config", str(path), "--seed-override", "5"])
    dirs = sorted(runs.iterdir())
    assert len(dirs) == 2
    assert json.loads((dirs[0] / "config.json").read_text())["init_seed"] in (0, 5)


def test_console_entry_point(tmp_path, runs):
    proc = subprocess.run(
        [sys.executable, "-m", "skiplab.cli", "train", "--config", str(tmp_path / "none.json")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 3 and "invalid" in proc.stderr


def test_canonical_is_sorted():
    assert canonical({"b": 1, "a": 2}).index('"a"') < canonical({"b": 1, "a": 2}).index('"b"')
