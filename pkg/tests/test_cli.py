import csv

import numpy as np
import pytest

from tripad.cli import _pairs, run
from tripad.config import ModelConfig, dump_config, parse_config_text, resolve_config
from tripad.errors import ConfigError

FAST = [
    "synth.length=300", "synth.spikes=100:2,250:1", "synth.level_shifts=170:20",
    "model.window=16", "model.patch_sizes=4,8", "model.d=4", "model.d_prime=8",
    "backbone.d_model=16", "backbone.layers=1", "backbone.heads=2",
    "train.epochs=1", "train.max_steps=4", "train.batch_size=8",
]


def _args(command, out, *extra, sets=FAST):
    argv = [command, "--out", str(out)]
    for s in list(sets) + list(extra):
        argv += ["--set", s]
    return argv


def _data(out):
    return [f"data.train_values={out}/train_values.csv", f"data.test_values={out}/test_values.csv",
            f"data.test_labels={out}/test_labels.csv"]


def test_full_command_chain(tmp_path):
    assert run(_args("synth", tmp_path)) == 0
    for name in ("train_values", "train_labels", "test_values", "test_labels"):
        assert (tmp_path / f"{name}.csv").is_file()
    test_labels = np.loadtxt(tmp_path / "test_labels.csv", skiprows=1)
    assert test_labels.sum() == 23
    assert run(_args("train", tmp_path, *_data(tmp_path))) == 0
    assert (tmp_path / "model.ckpt").is_file()
    assert (tmp_path / "loss_history.csv").read_text().startswith("epoch,loss\n")
    assert run(_args("detect", tmp_path, *_data(tmp_path))) == 0
    with open(tmp_path / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 300 and set(rows[0]) == {"index", "score", "label"}
    assert run(_args("eval", tmp_path)) == 0
    report = parse_config_text((tmp_path / "report.txt").read_text())
    assert set(report) == {"pate", "auc_roc", "auc_pr", "best_f1", "best_f1_threshold"}
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "command = eval" in manifest and "code_version" in manifest


def test_eval_on_perfect_scores(tmp_path):
    labels = np.zeros(50, dtype=int)
    labels[20:25] = 1
    with open(tmp_path / "scores.csv", "w") as fh:
        fh.write("index,score,label\n")
        fh.writelines(f"{i},{float(y)},{y}\n" for i, y in enumerate(labels))
    assert run(["eval", "--out", str(tmp_path)]) == 0
    assert parse_config_text((tmp_path / "report.txt").read_text())["auc_roc"] == "1.0"


def test_rerun_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(_args("synth", out)) == 0
        assert run(_args("train", out, *_data(a))) == 0
        assert run(_args("detect", out, *_data(a))) == 0
    for name in ("train_values.csv", "test_values.csv", "model.ckpt", "loss_history.csv", "scores.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_ablate_has_nine_rows(tmp_path):
    assert run(_args("ablate", tmp_path)) == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == [
        "TriP-LLM", "w/o Selection", "w/o Patching", "w/o Global", "Base LLM",
        "Seq-decoder", "Remove LLM", "LLM2Trans", "LLM2Atten",
    ]
    assert all(0.0 <= float(r["auc_roc"]) <= 1.0 for r in rows)


def test_membench(tmp_path):
    sets = FAST + ["membench.batch_sizes=2", "membench.patch_sizes=4", "membench.channels=1,4"]
    assert run(_args("membench", tmp_path, sets=sets)) == 0
    with open(tmp_path / "membench.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    ci4 = next(r for r in rows if r["mode"] == "CI" and r["channels"] == "4")
    trip4 = next(r for r in rows if r["mode"] == "TriP" and r["channels"] == "4")
    assert int(ci4["total_tokens"]) == 4 * int(trip4["total_tokens"])


def test_exit_codes(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path), "--set", "model.bogus=1"]) == 2
    assert "model.bogus" in capsys.readouterr().err
    assert run(["train", "--out", str(tmp_path), "--set", "model.window=abc"]) == 2
    assert run(["train", "--out", str(tmp_path)]) == 2  # no data path configured
    missing = ["--set", f"data.train_values={tmp_path}/nope.csv"]
    assert run(["train", "--out", str(tmp_path), *missing]) == 1
    assert run(["train", "--out", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == 2
    with pytest.raises(SystemExit):
        run(["frobnicate"])


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nmodel.d = 8\ntrain.seed = 4\nmodel.patch_sizes = 4, 8\n")
    from tripad.config import load_config_file

    cfg = resolve_config(load_config_file(cfg_file), ["model.d=12"], seed=9)
    assert cfg["model.d"] == 12 and cfg["train.seed"] == 9 and cfg["model.patch_sizes"] == (4, 8)
    assert resolve_config(parse_config_text(dump_config(cfg))) == cfg
    model_cfg = ModelConfig.from_flat(cfg)
    assert ModelConfig.from_flat(model_cfg.to_flat()) == model_cfg
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign")
    with pytest.raises(ConfigError):
        resolve_config({}, ["noequals"])


def test_injection_pairs():
    assert _pairs("500:1, 800:3,42") == [(500, 1), (800, 3), (42, 1)]
    with pytest.raises(ConfigError):
        _pairs("a:b")
