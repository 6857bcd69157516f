import csv
import io

import numpy as np
import pytest

from crdflow import trainer
from crdflow.cli import main
from crdflow.config import loads
from crdflow.io import write_checkpoint

SMALL = """
schema_version: 1
task: two_modes_1d
reward: {tag: mode_preference, target: [1.0], rival: [-1.0]}
model: {hidden: [16, 16]}
pretrain: {steps: 100, batch_size: 128}
train: {steps: 20, log_every: 10, checkpoint_every: 10, K: 4, groups_per_batch: 2}
eval: {n_samples: 64}
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_tilt_check(capsys):
    assert main(["tilt-check"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 5 and all(r["status"] == "PASS" for r in rows)


def test_train_eval_plot_bon(cfg_path, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CRDFLOW_RUN_ROOT", str(tmp_path / "root"))
    assert main(["train", "--config", str(cfg_path)]) == 0
    run = tmp_path / "root" / "train_seed0"
    summary = _rows(capsys.readouterr().out)[0]
    assert int(summary["steps"]) == 20
    assert (run / "plots" / "reward.svg").exists() and (run / "plots" / "reward.png").exists()

    assert main(["eval", "--checkpoint", str(run / "checkpoints" / "step_000020"), "-n", "32"]) == 0
    models = [r["model"] for r in _rows(capsys.readouterr().out)]
    assert models == ["theta", "samp", "old", "phi"]

    assert main(["plot", "--run", str(run), "--columns", "kl_to_phi", "--svg-only"]) == 0
    assert (run / "plots" / "kl_to_phi.svg").exists()
    capsys.readouterr()

    out = tmp_path / "bon"
    ckpt = str(run / "checkpoints" / "step_000020")
    assert main(["bon", "--checkpoint", ckpt, "--n-max", "4", "--repeats", "5", "--out", str(out)]) == 0
    rows = _rows(capsys.readouterr().out)
    best = [float(r["best_of_n_reward"]) for r in rows]
    assert len(rows) == 4 and all(b >= a for a, b in zip(best, best[1:]))
    assert (out / "bon.csv").exists() and (out / "bon.svg").exists() and (out / "bon.png").exists()


def test_pretrain(cfg_path, tmp_path, capsys):
    assert main(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "checkpoints" / "pretrained" / "phi.bin").exists()
    assert (tmp_path / "p" / "pretrain_loss.csv").exists()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\ntask: two_modes_1d\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "reward" in capsys.readouterr().err


def test_numeric_abort_exit_code(cfg_path, tmp_path):
    cfg = loads(SMALL)
    phi = trainer.pretrain(cfg, steps=0)
    phi.tensors["b2"][:] = np.nan
    write_checkpoint(tmp_path / "phi", {"phi": phi})
    cfg_nan = tmp_path / "nan.yaml"
    cfg_nan.write_text(SMALL.replace("pretrain: {", f"pretrain: {{checkpoint: '{tmp_path / 'phi'}', "))
    assert main(["train", "--config", str(cfg_nan), "--out", str(tmp_path / "r")]) == 3


def test_plot_needs_input(capsys):
    assert main(["plot"]) == 2
