import csv
import json

import numpy as np
import pytest
from PIL import Image

from selpda import cli
from selpda.errors import TrainingError
from selpda.trainer import Trainer

NETWORK = {"content_dim": 8, "style_dim": 4, "decoder_width": 4, "discriminator_width": 8,
           "backbone": {"feature_dim": 8, "conv_widths": [2, 2, 2]}}


def _config(tmp_path, epochs=1, **train):
    return {
        "task": {"synthetic": {"source_classes": [f"c{i}" for i in range(6)], "target_classes": ["c0", "c1", "c2"],
                               "n_source": 24, "n_target": 12, "image_size": 8}},
        "train": {"epochs": epochs, "batch_size": 8, **train},
        "network": NETWORK,
        "output_dir": str(tmp_path / "run"),
    }


def _write(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def test_train_writes_all_artifacts(tmp_path, capsys):
    path = _write(tmp_path, _config(tmp_path))
    assert cli.main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    resolved = json.loads((run / "config.resolved").read_text())
    assert resolved["selpda_version"] and resolved["config"]["train"]["epochs"] == 1
    records = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == 1
    assert set(records[0]) >= {"epoch", "loss", "class_weights", "lr"}
    report = json.loads((run / "report.json").read_text())
    assert 0 <= report["accuracy"] <= 100
    assert "acc_restricted" in (run / "summary.txt").read_text()
    with open(run / "weights_curve.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "t", "delta_sq", "chosen"]
    assert (run / "checkpoint.npz").exists()
    assert "synthetic6->3" in capsys.readouterr().out
    # the resolved file is itself a loadable config
    assert cli.load_run_config(run / "config.resolved").train.epochs == 1


def test_rerun_is_identical(tmp_path):
    path = _write(tmp_path, _config(tmp_path, epochs=3))
    reports, metrics = [], []
    for out in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / out)]) == 0
        reports.append(json.loads((tmp_path / out / "report.json").read_text()))
        metrics.append((tmp_path / out / "metrics.jsonl").read_text())
    assert reports[0]["accuracy"] == reports[1]["accuracy"]
    assert metrics[0] == metrics[1]


def test_seed_override(tmp_path):
    path = _write(tmp_path, _config(tmp_path))
    assert cli.main(["train", "--config", str(path), "--seed", "4"]) == 0
    resolved = json.loads((tmp_path / "run" / "config.resolved").read_text())
    assert resolved["config"]["train"]["seed"] == 4


def test_eval_and_report(tmp_path, capsys):
    path = _write(tmp_path, _config(tmp_path, epochs=3))
    assert cli.main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    trained = json.loads((run / "report.json").read_text())
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--config", str(path),
                     "--out", str(tmp_path / "ev")]) == 0
    evaluated = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert evaluated["accuracy"] == trained["accuracy"]
    assert evaluated["restricted_accuracy"] == trained["restricted_accuracy"]

    capsys.readouterr()
    assert cli.main(["report", "--run-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert "acc_restricted" in out and "selective" in out
    for name in ("weights_curve.png", "losses.png", "class_weights.png"):
        assert (run / name).stat().st_size > 0


def test_eval_untrained_checkpoint(tmp_path):
    path = _write(tmp_path, _config(tmp_path, epochs=0))
    assert cli.main(["train", "--config", str(path)]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert 0 <= report["accuracy"] <= 100
    assert report["restricted_accuracy"] == report["accuracy"]


def test_ablation_reports_unrestricted_only(tmp_path):
    path = _write(tmp_path, _config(tmp_path, binarize=False))
    assert cli.main(["train", "--config", str(path)]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["restricted_accuracy"] is None
    assert "pinned-weights" in (tmp_path / "run" / "summary.txt").read_text()


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c["train"].update(lamda_recon=1.0), "unknown keys"),
    (lambda c: c["task"].update(folder={"source_root": "a", "target_root": "b", "source_classes": ["x", "y"],
                                        "target_classes": ["x"]}), "exactly one"),
    (lambda c: c["task"].pop("synthetic"), "exactly one"),
    (lambda c: c["task"]["synthetic"].update(target_classes=["zz"]), "subset"),
    (lambda c: c["train"].update(epochs="ten"), "expected int"),
])
def test_invalid_config_exits_nonzero(tmp_path, capsys, mutate, message):
    config = _config(tmp_path)
    mutate(config)
    assert cli.main(["train", "--config", str(_write(tmp_path, config))]) == cli.EXIT_CONFIG
    assert message in capsys.readouterr().err


def test_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_CONFIG


def test_training_abort_keeps_last_checkpoint(tmp_path, monkeypatch, capsys):
    original = Trainer.train_step

    def flaky(self, source, target):
        if self.state.epoch == 1:
            raise TrainingError("non-finite adv loss (nan)")
        return original(self, source, target)

    monkeypatch.setattr(Trainer, "train_step", flaky)
    path = _write(tmp_path, _config(tmp_path, epochs=3))
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_TRAINING
    assert "adv" in capsys.readouterr().err
    run = tmp_path / "run"
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 1
    from selpda.checkpoint import read_meta

    assert read_meta(run / "checkpoint.npz")["state"]["epoch"] == 1


def test_folder_task(tmp_path):
    rng = np.random.default_rng(0)
    for root, classes in (("src", ["a", "b", "c"]), ("tgt", ["a", "b"])):
        for c in classes:
            (tmp_path / root / c).mkdir(parents=True)
            for i in range(3):
                Image.fromarray(rng.integers(0, 255, (10, 10, 3), dtype=np.uint8)).save(tmp_path / root / c / f"{i}.png")
    config = {
        "task": {"folder": {"source_root": str(tmp_path / "src"), "target_root": str(tmp_path / "tgt"),
                            "source_classes": ["a", "b", "c"], "target_classes": ["a", "b"], "image_size": 8}},
        "train": {"epochs": 1, "batch_size": 4},
        "network": NETWORK,
        "output_dir": str(tmp_path / "run"),
    }
    assert cli.main(["train", "--config", str(_write(tmp_path, config))]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["n_samples"] == 6
    assert sorted(report["per_class_accuracy"]) == ["0", "1"]
