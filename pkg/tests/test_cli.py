from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from vflow import cli
from vflow import gradcheck as G
from vflow.config import parse_config

SMOKE = """\
task:
  name: g→8g@2
  n_time_points: 4
model:
  clm: {d_model: 16, n_layers: 2, d_ff: 32}
  vae: {d_latent: 4, d_hidden: 16}
train:
  steps: 15
  batch_size: 16
  seed: 0
eval:
  metrics: [mmd, w2]
  n_eval: 64
  seeds: [0, 1]
"""


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(SMOKE, encoding="utf-8")
    return path


def train(config_file, out, *extra):
    assert cli.main(["train", "--config", str(config_file), "--out", str(out), *extra]) == 0
    return next(Path(out).glob("*.ckpt"))


def test_train_writes_checkpoint_and_loss_csv(config_file, tmp_path):
    ckpt = train(config_file, tmp_path / "a")
    loss = rows(next((tmp_path / "a").glob("*_loss.csv")))
    assert loss[0] == ["step", "loss", "cvfm", "kl"] and len(loss) == 16
    ckpt2 = train(config_file, tmp_path / "b")
    loss2 = rows(next((tmp_path / "b").glob("*_loss.csv")))
    assert loss[-1] == loss2[-1]
    assert ckpt.read_bytes() == ckpt2.read_bytes()


def test_eval_rows_and_aggregate(config_file, tmp_path):
    ckpt = train(config_file, tmp_path)
    assert cli.main(["eval", "--config", str(config_file), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "eval.csv")
    assert table[0] == ["digest", "task", "method", "seed", "mmd", "w2", "wall_s"]
    assert [r[3] for r in table[1:]] == ["0", "1", "mean±std"]
    assert all(r[0] == table[1][0] for r in table[1:])
    assert "±" in table[3][4]


def test_eval_rejects_foreign_checkpoint(config_file, tmp_path, capsys):
    ckpt = train(config_file, tmp_path)
    other = tmp_path / "other.yaml"
    other.write_text(SMOKE.replace("steps: 15", "steps: 16"), encoding="utf-8")
    assert cli.main(["eval", "--config", str(other), "--checkpoint", str(ckpt)]) == 2
    assert "does not match" in capsys.readouterr().err


def test_eval_size_cap(config_file, tmp_path, capsys):
    ckpt = train(config_file, tmp_path)
    assert cli.main(["eval", "--config", str(config_file), "--checkpoint", str(ckpt), "--n", "3000"]) == 2
    assert "2048" in capsys.readouterr().err


def test_generate_writes_samples(config_file, tmp_path):
    ckpt = train(config_file, tmp_path)
    assert cli.main(["generate", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--n", "7", "--seed", "3"]) == 0
    table = rows(tmp_path / "samples_calmflow_s3.csv")
    assert table[0] == ["x0", "x1"] and len(table) == 8


def test_ablate_tau_reuses_training(tmp_path, monkeypatch):
    text = SMOKE + "ablation:\n  param: tau\n  values: [0.0, 0.2, 1.0]\n"
    cfg = parse_config(text)
    calls = []
    real = cli.train_experiment
    monkeypatch.setattr(cli, "train_experiment", lambda c, log=None: calls.append(c) or real(c, log))
    out = cli.ablation_rows(cfg)
    assert len(calls) == len(cfg.eval.seeds)
    assert len(out) == 3 * 2 * 2  # values x seeds x metrics
    assert {r[6] for r in out} == {"tau"}


def test_ablate_time_points_retrains(tmp_path, monkeypatch):
    cfg = parse_config(SMOKE + "ablation:\n  param: n_time_points\n  values: [3, 4]\n")
    calls = []
    real = cli.train_experiment
    monkeypatch.setattr(cli, "train_experiment", lambda c, log=None: calls.append(c) or real(c, log))
    out = cli.ablation_rows(cfg)
    assert sorted(c.task.n_time_points for c in calls) == [3, 3, 4, 4]
    assert len(out) == 2 * 2 * 2


def test_ablate_command_writes_long_csv(tmp_path):
    path = tmp_path / "ab.yaml"
    path.write_text(SMOKE + "ablation:\n  param: beta\n  values: [0.0, 1.0]\n", encoding="utf-8")
    assert cli.main(["ablate", "--config", str(path), "--out", str(tmp_path), "--seed", "0"]) == 0
    table = rows(tmp_path / "ablation.csv")
    assert tuple(table[0]) == cli.LONG_COLUMNS
    assert len(table) == 1 + 2 * 2


def test_cfm_pipeline(tmp_path):
    path = tmp_path / "cfm.yaml"
    path.write_text("task: g→8g@2\nmethod: cfm\nmodel:\n  cfm: {width: 16, n_layers: 2}\n"
                    "train:\n  steps: 5\neval:\n  n_eval: 32\n  seeds: [0]\n", encoding="utf-8")
    ckpt = train(path, tmp_path)
    assert cli.main(["eval", "--config", str(path), "--checkpoint", str(ckpt), "--out", str(tmp_path)]) == 0
    assert rows(tmp_path / "eval.csv")[1][2] == "cfm"


def test_conditional_task_generates_all_classes(tmp_path):
    cfg = parse_config(SMOKE.replace("n_time_points: 4", "n_time_points: 3\n  conditional: true"))
    trained = cli.train_experiment(cfg)
    values, _ = cli.evaluate_model(cfg, "calmflow", trained.model, 0, n=40)
    assert np.isfinite(values["mmd"])


def test_missing_task_name_reports_field(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("task:\n  n_time_points: 5\n", encoding="utf-8")
    assert cli.main(["train", "--config", str(path)]) == 2
    assert "field 'task.name'" in capsys.readouterr().err


def test_tasks_lists_registry(capsys):
    assert cli.main(["tasks"]) == 0
    out = capsys.readouterr().out
    assert "2moons→8g@2" in out and "g→8g@1000" in out


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "max_rel_error" in out and "calmflow_loss" in out


def test_gradcheck_fails_on_sign_flip(flip_backward, capsys):
    flip_backward("softmax")
    assert cli.main(["gradcheck"]) == 1
    assert "softmax" in capsys.readouterr().out.splitlines()[-1]
