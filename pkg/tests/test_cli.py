import csv
import json

import numpy as np
import pytest
from PIL import Image

from floodcnn.cli import main, parse_config, parse_grid
from floodcnn.errors import ConfigError
from floodcnn.layers import Dense, Flatten
from floodcnn.model import Model, save_checkpoint


def _folder(root, n_per_class=5, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for label, name in enumerate(("damage", "no_damage")):
        (root / name).mkdir(parents=True)
        for i in range(n_per_class):
            base = 200 if label == 0 else 40
            img = np.clip(base + rng.integers(-30, 30, (size, size, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(root / name / f"{i:03d}.png")
    return root


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# nothing here\n\n")
    cfg = parse_config(path)
    assert cfg.lr == 0.001 and cfg.momentum == 0.9 and cfg.l2_lambda == 0.001
    assert cfg.batch_size == 64 and cfg.patience == 5 and cfg.arch == "vgg3block"


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lr = 0.01\nlambda = 0.0001  # decay\naugment = true\n")
    cfg = parse_config(path, {"lr": 0.001, "seed": None})
    assert cfg.lr == 0.001
    assert cfg.l2_lambda == 0.0001 and cfg.augment is True


def test_unknown_key_named(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("learning_rte = 0.01\n")
    with pytest.raises(ConfigError, match="learning_rte"):
        parse_config(path)
    assert main(["train", "--config", str(path)]) == 2


@pytest.mark.parametrize("text", ["lr = fast", "arch = resnet", "momentum = 1.5", "just words"])
def test_malformed_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_parse_grid():
    assert parse_grid("lr=0.01,0.001; lambda=0.001,0.0001") == [("lr", [0.01, 0.001]), ("lambda", [0.001, 0.0001])]
    with pytest.raises(ConfigError):
        parse_grid("speed=1,2")


def test_param_count(capsys):
    assert main(["param-count", "--arch", "vgg3block"]) == 0
    out = capsys.readouterr().out.rstrip().splitlines()
    assert out[-1] == "Total: 151,298,338"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out


def test_missing_data_folder(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--val", str(tmp_path), "--out", str(tmp_path)]) == 2
    assert "data" in capsys.readouterr().err


def _perfect_checkpoint(path):
    # damage images are bright, no_damage images dark
    model = Model([Flatten(), Dense(12, 2)], (2, 2, 3), 2, "brightness")
    model.initialize(np.random.default_rng(0))
    w = np.zeros((12, 2), np.float32)
    w[:, 0] = 10
    model.layers[1].params["weight"] = w
    model.layers[1].params["bias"] = np.array([-60, 0], np.float32)
    save_checkpoint(model, path, rng_seed=0)


def test_evaluate_perfect_stub(tmp_path):
    data = tmp_path / "test"
    for label, name in enumerate(("damage", "no_damage")):
        (data / name).mkdir(parents=True)
        for i in range(5):
            Image.fromarray(np.full((2, 2, 3), 255 if label == 0 else 0, np.uint8)).save(data / name / f"{i}.png")
    ckpt = tmp_path / "stub.ckpt"
    _perfect_checkpoint(ckpt)
    out = tmp_path / "out"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--test", str(data), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["metrics"]["accuracy"] == 1.0
    assert report["confusion_matrix"] == {"tp": 5, "fp": 0, "fn": 0, "tn": 5}

    assert main(["predict", "--checkpoint", str(ckpt), "--data", str(data / "damage"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "predictions.csv")))
    assert len(rows) == 5 and {r["label"] for r in rows} == {"damage"}


@pytest.mark.slow
def test_train_evaluate_predict_roundtrip(tmp_path):
    train_dir = _folder(tmp_path / "train", seed=1)
    val_dir = _folder(tmp_path / "val", seed=2)
    common = ["--input-size", "16", "--arch", "vgg3block", "--batch-size", "4", "--max-epochs", "2"]
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--data", str(train_dir), "--val", str(val_dir), "--out", str(out), *common]) == 0
        assert (out / "model.ckpt").exists()
        history = (out / "history.csv").read_text()
        record = json.loads((out / "run.json").read_text())
        del record["metadata"]
        del record["config"]["out"]
        outputs.append((history, record, (out / "model.ckpt").read_bytes()))
    assert outputs[0][0] == outputs[1][0]
    assert outputs[0][1] == outputs[1][1]
    assert outputs[0][2] == outputs[1][2]

    out = tmp_path / "a"
    ckpt = str(out / "model.ckpt")
    assert main(["evaluate", "--checkpoint", ckpt, "--test", str(val_dir), "--out", str(out)]) == 0
    first = (out / "metrics.json").read_text()
    assert main(["evaluate", "--checkpoint", ckpt, "--test", str(val_dir), "--out", str(out)]) == 0
    assert (out / "metrics.json").read_text() == first
    assert main(["predict", "--checkpoint", ckpt, "--data", str(val_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "predictions.csv")))
    assert len(rows) == 10
    assert all(0.0 <= float(r["p_damage"]) <= 1.0 for r in rows)


def test_cv_and_tune_commands(tmp_path):
    data = _folder(tmp_path / "train", n_per_class=4, size=8)
    val = _folder(tmp_path / "val", n_per_class=2, size=8, seed=3)
    out = tmp_path / "out"
    common = ["--input-size", "8", "--batch-size", "4", "--max-epochs", "1", "--out", str(out)]
    assert main(["cv", "--data", str(data), "--k", "2", *common]) == 0
    report = json.loads((out / "cv_report.json").read_text())
    assert len(report["folds"]) == 2
    assert main(["tune", "--data", str(data), "--val", str(val), "--grid", "lr=0.01,0.001;batch_size=2,4", *common]) == 0
    trials = json.loads((out / "trials.json").read_text())
    assert len(trials) == 4
    assert (out / "best_config.txt").read_text().startswith("# greedy")
