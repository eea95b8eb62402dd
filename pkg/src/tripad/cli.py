"""Command-line entry point: ``tripad {synth,train,detect,eval,ablate,membench}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .benchmark import grid_csv, membench_grid
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ModelConfig, dump_config, load_config_file, resolve_config
from .data import (LabeledSeries, SynthSpec, load_csv_dataset, make_windows, save_csv_dataset,
                   synth_anomaly_series, zscore_normalize)
from .errors import ConfigError, DataError, TripError
from .evaluation import PateConfig, evaluate, format_report, report_csv
from .model import ABLATIONS, ablation_config, build_model
from .pipeline import (AnomalyScoreSeries, anomaly_score, read_scores_csv, train,
                       write_scores_csv)

log = logging.getLogger("tripad")

COMMANDS = ("synth", "train", "detect", "eval", "ablate", "membench")


def _pairs(text: str) -> list[tuple[int, int]]:
    """Parse ``"500:1,800:3"`` into ``[(500, 1), (800, 3)]``; a bare ``t`` means width 1."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        start, _, width = item.partition(":")
        try:
            out.append((int(start), int(width or 1)))
        except ValueError:
            raise ConfigError(f"bad injection {item!r}; expected start[:width]") from None
    return out


def synth_spec(cfg: dict, anomalous: bool) -> SynthSpec:
    spikes = _pairs(cfg["synth.spikes"]) if anomalous else []
    shifts = _pairs(cfg["synth.level_shifts"]) if anomalous else []
    ratio = cfg["synth.anomaly_ratio"] if anomalous and not (spikes or shifts) else None
    return SynthSpec(
        length=cfg["synth.length"], channels=cfg["synth.channels"],
        periods=cfg["synth.periods"], noise_std=cfg["synth.noise_std"],
        spikes=spikes, spike_magnitude=cfg["synth.spike_magnitude"],
        level_shifts=shifts, shift_magnitude=cfg["synth.shift_magnitude"],
        anomaly_ratio=ratio, name="test" if anomalous else "train",
    )


def synth_pair(cfg: dict) -> tuple[LabeledSeries, LabeledSeries]:
    seed = cfg["train.seed"]
    return (synth_anomaly_series(synth_spec(cfg, False), seed),
            synth_anomaly_series(synth_spec(cfg, True), seed + 1))


def _load(cfg: dict, split: str) -> LabeledSeries:
    values = cfg[f"data.{split}_values"]
    if not values:
        raise ConfigError(f"data.{split}_values is required for this command")
    return load_csv_dataset(values, cfg[f"data.{split}_labels"] or None)


def _model_config(cfg: dict, channels: int) -> ModelConfig:
    return replace(ModelConfig.from_flat(cfg), channels=channels)


def _fit(config: ModelConfig, train_series: LabeledSeries):
    normed, stats = zscore_normalize(train_series)
    windows = make_windows(normed, config.window, config.train.window_stride)
    return train(build_model(config), windows, config.train, norm_stats=stats)


def _score(trained, test: LabeledSeries, cfg: dict) -> AnomalyScoreSeries:
    normed, _ = zscore_normalize(test, trained.norm_stats)
    return anomaly_score(trained, normed, cfg["score.stride"], cfg["score.smooth"], cfg["score.batch_size"])


def cmd_synth(cfg, out: Path) -> None:
    train_series, test_series = synth_pair(cfg)
    save_csv_dataset(train_series, out / "train_values.csv", out / "train_labels.csv")
    save_csv_dataset(test_series, out / "test_values.csv", out / "test_labels.csv")


def cmd_train(cfg, out: Path) -> None:
    series = _load(cfg, "train")
    trained = _fit(_model_config(cfg, series.channels), series)
    checkpoint_save(trained, out / "model.ckpt")
    with (out / "loss_history.csv").open("w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(trained.history))


def cmd_detect(cfg, out: Path) -> None:
    trained = checkpoint_load(cfg["detect.checkpoint"] or out / "model.ckpt")
    write_scores_csv(out / "scores.csv", _score(trained, _load(cfg, "test"), cfg))


def _pate_config(cfg) -> PateConfig:
    return PateConfig(cfg["eval.pre_buffers"], cfg["eval.post_buffers"])


def cmd_eval(cfg, out: Path) -> None:
    scores_path = cfg["eval.scores"] or out / "scores.csv"
    result = read_scores_csv(scores_path)
    labels = result.labels
    if cfg["eval.labels"]:
        labels = np.loadtxt(cfg["eval.labels"], dtype=np.int64, ndmin=1)
    if labels is None or len(labels) != len(result.scores):
        raise DataError("eval needs one label per score (label column or eval.labels)")
    report = evaluate(result.scores, labels, _pate_config(cfg))
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")


def cmd_ablate(cfg, out: Path) -> None:
    if cfg["data.train_values"]:
        train_series, test_series = _load(cfg, "train"), _load(cfg, "test")
    else:
        train_series, test_series = synth_pair(cfg)
    if test_series.labels is None:
        raise DataError("ablate needs labels for the test series")
    base = _model_config(cfg, train_series.channels)
    rows = []
    for name in ABLATIONS:
        log.info("ablation variant: %s", name)
        trained = _fit(ablation_config(base, name), train_series)
        scores = _score(trained, test_series, cfg)
        report = evaluate(scores.scores, test_series.labels, _pate_config(cfg))
        rows.append({"variant": name, **report.as_dict(), "final_loss": trained.history[-1]})
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)


def cmd_membench(cfg, out: Path) -> None:
    base = ModelConfig.from_flat(cfg)
    rows = membench_grid(
        base, cfg["membench.backbones"], cfg["membench.batch_sizes"], cfg["membench.patch_sizes"],
        cfg["membench.channels"], cfg["membench.bytes_per_value"], cfg["membench.measure"],
    )
    (out / "membench.csv").write_text(grid_csv(rows), encoding="utf-8")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "detect": cmd_detect,
    "eval": cmd_eval, "ablate": cmd_ablate, "membench": cmd_membench,
}


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    header = f"command = {command}\ncode_version = {__version__}\nseed = {cfg['train.seed']}\n"
    (out / "manifest.txt").write_text(header + dump_config(cfg), encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripad", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat 'section.key = value' config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        write_manifest(out, args.command, cfg)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"tripad: config error: {exc}", file=sys.stderr)
        return 2
    except (TripError, OSError, ValueError) as exc:
        print(f"tripad: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
