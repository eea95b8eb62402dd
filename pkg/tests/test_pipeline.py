from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn

from tripad.checkpoint import FORMAT_VERSION, MAGIC, checkpoint_load, checkpoint_save
from tripad.config import TrainConfig
from tripad.data import LabeledSeries, SynthSpec, make_windows, synth_anomaly_series, zscore_normalize
from tripad.errors import CheckpointError, DataError, NumericsError, ShapeError, SizeError
from tripad.model import build_model
from tripad.pipeline import (aggregate_window_scores, anomaly_score, moving_average,
                             read_scores_csv, reconstruction_loss, score_window_starts, train,
                             write_scores_csv)


def test_loss_examples():
    t = torch.randn(2, 5, 3)
    assert reconstruction_loss(t, t).item() == 0.0
    assert reconstruction_loss(t + 1, t).item() == pytest.approx(1.0)
    assert reconstruction_loss(torch.zeros(1, 2, 1), torch.tensor([[[1.0], [3.0]]])).item() == 5.0
    with pytest.raises(ShapeError):
        reconstruction_loss(torch.zeros(1, 2, 1), torch.zeros(1, 3, 1))


def _windows(cfg, length=80, seed=0):
    series = synth_anomaly_series(SynthSpec(length=length, channels=cfg.channels), seed)
    normed, stats = zscore_normalize(series)
    return make_windows(normed, cfg.window, 1), stats, normed


def test_training_updates_only_trainable_tensors(small_config):
    cfg = replace(small_config, train=TrainConfig(epochs=100, batch_size=8, max_steps=100))
    model = build_model(cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    windows, stats, _ = _windows(cfg)
    trained = train(model, windows, norm_stats=stats)
    assert trained.fingerprint_start == trained.fingerprint_end
    changed = [n for n, p in model.named_parameters() if not torch.equal(before[n], p)]
    assert changed and not any(n.startswith("backbone.") for n in changed)


def test_zero_learning_rate_changes_nothing(small_config):
    cfg = replace(small_config, train=TrainConfig(lr=0.0, epochs=3, batch_size=65, seed=0))
    model = build_model(cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    windows, _, _ = _windows(cfg)
    trained = train(model, windows)
    assert all(torch.equal(before[n], p) for n, p in model.named_parameters())
    assert trained.history[0] == trained.history[1] == trained.history[2]


def test_overfits_a_single_window(micro_config):
    cfg = replace(micro_config, train=TrainConfig(lr=1e-2, epochs=500, batch_size=1, seed=0))
    model = build_model(cfg)
    x = torch.sin(torch.linspace(0, 6, 16)).view(1, 16, 1).repeat(1, 1, 2)
    x[..., 1] *= -0.5
    trained = train(model, x.numpy())
    with torch.no_grad():
        final = reconstruction_loss(model(x), x).item()
    assert len(trained.history) == 500
    assert final < 0.01 * trained.history[0]


def test_training_is_deterministic(small_config):
    cfg = replace(small_config, train=TrainConfig(epochs=2, batch_size=8, seed=3))
    windows, _, _ = _windows(cfg)
    a, b = train(build_model(cfg), windows), train(build_model(cfg), windows)
    assert a.history == b.history
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_training_errors(small_config):
    with pytest.raises(DataError):
        train(build_model(small_config), np.zeros((0, 16, 2)))
    bad = np.full((4, 16, 2), np.inf)
    with pytest.raises(NumericsError):
        train(build_model(small_config), bad)


class _Echo(nn.Module):
    """Scoring stub: reconstructs its input plus a fixed offset."""

    def __init__(self, window, channels, offset=None):
        super().__init__()
        self.config = SimpleNamespace(window=window)
        self.anchor = nn.Parameter(torch.zeros(()))
        self.offset = torch.zeros(window, channels) if offset is None else offset

    def forward(self, x):
        return x + self.offset


def test_perfect_reconstruction_scores_zero():
    test = LabeledSeries(np.random.default_rng(0).normal(size=(50, 3)))
    scores = anomaly_score(_Echo(8, 3), test, stride=1).scores
    assert scores.shape == (50,) and np.all(scores == 0)


def test_channel_mean_squared_error():
    offset = torch.zeros(8, 4)
    offset[3, 1] = 1.0
    scores = anomaly_score(_Echo(8, 4, offset), LabeledSeries(np.zeros((16, 4)))).scores
    expected = np.zeros(16)
    expected[[3, 11]] = 0.25
    np.testing.assert_array_equal(scores, expected)


def test_overlapping_window_scores_average():
    per_window = np.array([[2.0, 2.0], [4.0, 4.0]])
    np.testing.assert_array_equal(aggregate_window_scores(per_window, np.array([0, 1]), 3), [2, 3, 4])


def test_window_starts_cover_tail():
    assert score_window_starts(10, 4, 4).tolist() == [0, 4, 6]
    assert score_window_starts(8, 4, 4).tolist() == [0, 4]
    with pytest.raises(SizeError):
        score_window_starts(3, 4, 1)
    with pytest.raises(SizeError):
        anomaly_score(_Echo(8, 1), LabeledSeries(np.zeros((5, 1))))


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.array([0.0, 3, 0, 0]), 3), [0, 1, 1, 1])
    x = np.arange(5.0)
    assert moving_average(x, 0) is x


def test_scores_csv_round_trip(tmp_path):
    model = _Echo(4, 1, torch.arange(4.0).view(4, 1) / 10)
    res = anomaly_score(model, LabeledSeries(np.zeros((10, 1)), np.r_[np.zeros(9), 1]), stride=1)
    write_scores_csv(tmp_path / "s.csv", res)
    back = read_scores_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.scores, res.scores)
    np.testing.assert_array_equal(back.labels, res.labels)
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_scores_csv(tmp_path / "bad.csv")


@pytest.fixture
def trained_small(small_config):
    cfg = replace(small_config, train=TrainConfig(epochs=1, batch_size=8, seed=0, max_steps=5))
    windows, stats, normed = _windows(cfg)
    return train(build_model(cfg), windows, norm_stats=stats), normed


def test_checkpoint_round_trip(tmp_path, trained_small):
    trained, normed = trained_small
    checkpoint_save(trained, tmp_path / "m.ckpt")
    loaded = checkpoint_load(tmp_path / "m.ckpt")
    assert loaded.model.config == trained.model.config
    assert loaded.history == trained.history
    assert (loaded.fingerprint_start, loaded.fingerprint_end) == (trained.fingerprint_start,
                                                                  trained.fingerprint_end)
    np.testing.assert_array_equal(loaded.norm_stats.mean, trained.norm_stats.mean)
    for (n, a), (m, b) in zip(trained.model.state_dict().items(), loaded.model.state_dict().items()):
        assert n == m and torch.equal(a, b)
    np.testing.assert_array_equal(anomaly_score(loaded, normed, stride=1).scores,
                                  anomaly_score(trained, normed, stride=1).scores)


def test_checkpoint_corruption(tmp_path, trained_small):
    trained, _ = trained_small
    path = tmp_path / "m.ckpt"
    checkpoint_save(trained, path)
    data = path.read_bytes()
    for cut in (len(data) - 1, len(data) // 2, 10):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "t.ckpt")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(tmp_path / "f.ckpt")


def test_checkpoint_version_mismatch_names_both(tmp_path, trained_small):
    trained, _ = trained_small
    path = tmp_path / "m.ckpt"
    checkpoint_save(trained, path)
    data = bytearray(path.read_bytes())
    data[len(MAGIC):len(MAGIC) + 4] = (FORMAT_VERSION + 6).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError) as err:
        checkpoint_load(path)
    assert str(FORMAT_VERSION + 6) in str(err.value) and str(FORMAT_VERSION) in str(err.value)
