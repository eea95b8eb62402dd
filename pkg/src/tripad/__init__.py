"""Tri-branch patch-wise encoder with a frozen transformer backbone for
unsupervised multivariate time-series anomaly detection."""

__version__ = "0.1.0"

from .backbone import BackboneVariant, build_backbone, load_pretrained, random_gpt2_state
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ModelConfig, TrainConfig
from .data import (LabeledSeries, NormStats, SynthSpec, load_csv_dataset, make_windows,
                   synth_anomaly_series, zscore_normalize)
from .evaluation import PateConfig, auc, best_f1, evaluate, pate
from .model import ABLATIONS, TriPModel, ablation_config, build_model
from .pipeline import anomaly_score, reconstruction_loss, train

__all__ = [
    "ABLATIONS", "BackboneVariant", "LabeledSeries", "ModelConfig", "NormStats", "PateConfig",
    "SynthSpec", "TrainConfig", "TriPModel", "ablation_config", "anomaly_score", "auc",
    "best_f1", "build_backbone", "build_model", "checkpoint_load", "checkpoint_save",
    "evaluate", "load_csv_dataset", "load_pretrained", "make_windows", "pate",
    "random_gpt2_state", "reconstruction_loss", "synth_anomaly_series", "train",
    "zscore_normalize",
]
