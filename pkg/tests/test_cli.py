import csv
import json

import numpy as np
import pytest

from aotsnn import harness
from aotsnn.cli import main
from aotsnn.data import MNIST_FILES, Dataset, save_mnist_idx
from aotsnn.tensor import Rng


def synthetic_mnist(root, n_train=60, n_test=20, side=8, K=3):
    """Class k lights up the k-th horizontal band, plus noise."""
    rng = Rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        y = rng.integers(0, K, n)
        x = 0.2 * rng.random((n, 1, side, side))
        band = side // K
        for i, k in enumerate(y):
            x[i, 0, k * band:(k + 1) * band] += 0.7
        img, lab = MNIST_FILES[split]
        save_mnist_idx(Dataset(np.clip(x, 0, 1), y), root / img, root / lab)


@pytest.fixture
def setup(tmp_path):
    data = tmp_path / "data"
    synthetic_mnist(data)
    cfg = {
        "schema_version": 1,
        "name": "cli_tiny",
        "dataset": {"name": "mnist", "root": str(data), "train_size": 50, "val_size": 6},
        "network": {"input_shape": [1, 8, 8], "encoder": [[2]], "hidden": 8, "num_classes": 3, "T": 8, "dropout_rate": 0.2},
        "train": {"loss_mode": "AOT", "epochs": 1, "batch_size": 10},
        "estimator": {"kind": "aot"},
        "evaluation": {"batch_size": 20, "log_eval_size": 0},
        "seeds": [1],
        "output_dir": str(tmp_path / "runs"),
    }

    def write(name="cfg.json", **patch):
        d = json.loads(json.dumps(cfg))
        for section, values in patch.items():
            if isinstance(values, dict):
                d[section].update(values)
            else:
                d[section] = values
        p = tmp_path / name
        p.write_text(json.dumps(d))
        return str(p)

    return tmp_path, write


def report(path):
    return json.loads((path / "report.json").read_text())


def test_train_is_deterministic(setup):
    tmp, write = setup
    cfg = write()
    assert main(["train", "--config", cfg, "--out", str(tmp / "a")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp / "b")]) == 0
    assert (tmp / "a" / "model.ckpt").read_bytes() == (tmp / "b" / "model.ckpt").read_bytes()
    assert report(tmp / "a") == report(tmp / "b")
    assert (tmp / "a" / "train_log.jsonl").exists()


def test_zero_epochs_is_init_checkpoint(setup):
    tmp, write = setup
    cfg = write()
    assert main(["train", "--config", cfg, "--epochs", "0", "--out", str(tmp / "z")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp / "one")]) == 0
    assert (tmp / "z" / "model.ckpt").read_bytes() != (tmp / "one" / "model.ckpt").read_bytes()


@pytest.mark.parametrize("args,expected", [
    (["--estimator", "aot"], 8),
    (["--estimator", "mc_dropout", "--M", "5"], 40),
    (["--estimator", "mc_dropout", "--M", "5", "--T", "4"], 20),
    (["--estimator", "lts"], 8),
    (["--estimator", "lts_temp_scaled"], 8),
])
def test_eval_step_evals(setup, args, expected):
    tmp, write = setup
    cfg = write()
    main(["train", "--config", cfg, "--out", str(tmp / "m")])
    out = tmp / "e"
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp / "m" / "model.ckpt"), "--out", str(out)] + args) == 0
    rep = report(out)
    assert rep["step_evals_used"] == expected
    assert 0.0 <= rep["accuracy"] <= 1.0


def test_eval_ensemble_and_corruption(setup):
    tmp, write = setup
    cfg = write()
    for s in (1, 2):
        main(["train", "--config", cfg, "--seed", str(s), "--out", str(tmp / f"m{s}")])
    ck = [str(tmp / f"m{s}" / "model.ckpt") for s in (1, 2)]
    assert main(["eval", "--config", cfg, "--estimator", "ensemble", "--checkpoint", *ck, "--out", str(tmp / "e"),
                 "--corruption", "gaussian_noise:3"]) == 0
    rep = report(tmp / "e")
    assert rep["step_evals_used"] == 16 and "gaussian_noise" in rep["dataset"]


def test_sweep_and_report(setup):
    tmp, write = setup
    cfg = write(train={"epochs": 0})
    out = tmp / "sw"
    assert main(["sweep", "--config", cfg, "--axis", "dropout_rate", "--values", "0.1,0.9", "--seeds", "1,2", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "runs.csv").open()))
    assert len(rows) == 4 and {r["value"] for r in rows} == {"0.1", "0.9"}
    assert main(["report", str(out / "runs.csv"), "--out", str(tmp / "rep")]) == 0
    summary = list(csv.DictReader((tmp / "rep" / "summary.csv").open()))
    assert len(summary) == 2 and all(r["n"] == "2" and r["acc_std"] != "" for r in summary)
    accs = [float(r["acc"]) for r in rows if r["value"] == "0.1"]
    got = [float(r["acc_mean"]) for r in summary if r["value"] == "0.1"][0]
    assert got == pytest.approx(np.mean(accs))
    assert {"metric", "mean", "std"} <= set(next(csv.reader((tmp / "rep" / "long.csv").open())))


def test_report_single_run_has_empty_std(setup, tmp_path):
    rows = [{"model": "AOT", "T": 8, "passes": 1, "step_evals": 8, "bins": 15, "acc": 0.9, "brier": 0.01,
             "nll": 0.3, "ece": 0.02, "seed": 1, "config_hash": "x", "config": "c", "dataset": "d", "axis": "", "value": ""}]
    harness.write_rows(rows, tmp_path / "r.csv")
    agg = harness.aggregate(harness.read_rows([tmp_path / "r.csv"]))
    assert agg[0]["acc_std"] == "" and agg[0]["n"] == 1


def test_corrupt_writes_idx(setup):
    tmp, write = setup
    assert main(["corrupt", "--config", write(), "--corruption", "rotation:2", "--out", str(tmp / "c")]) == 0
    assert (tmp / "c" / "t10k-images-idx3-ubyte").exists()


@pytest.mark.parametrize("mutate", [
    {"train": {"bogus": 1}},
    {"schema_version": 2},
    {"train": {"seed": 4}},
    {"network": {"dropout_rate": 1.0}},
    {"evaluation": {"corruptions": ["fog"]}},
    {"seeds": []},
])
def test_bad_config_exit_2(setup, mutate):
    tmp, write = setup
    assert main(["train", "--config", write(**mutate), "--out", str(tmp / "x")]) == 2


def test_input_errors_exit_2(setup, tmp_path):
    tmp, write = setup
    cfg = write()
    assert main(["sweep", "--config", cfg, "--axis", "T", "--values", ",", "--out", str(tmp / "s")]) == 2
    assert main(["report"]) == 2
    assert main(["report", str(tmp_path / "missing.csv")]) == 2
    (tmp_path / "bad.csv").write_text("acc,brier\n0.5,0.1\n")
    assert main(["report", str(tmp_path / "bad.csv")]) == 2
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_numeric_failure_exit_3(setup):
    tmp, write = setup
    cfg = write(train={"lr0": 1e305})
    assert main(["train", "--config", cfg, "--out", str(tmp / "n")]) == 3
