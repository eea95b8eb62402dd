"""Backbone-token and activation-memory accounting: channel-independent (CI)
patching versus TriP's channel-mixing tokens.

Analytic counts are exact. Measured peaks come from an allocation hook and
are best-effort; on CPU builds the default hook tracks live tensor storage
created inside the measured closure.
"""

from __future__ import annotations

import csv
import gc
import io
import platform
import tracemalloc
import weakref
from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn as nn
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten

from .backbone import Backbone, BackboneVariant
from .config import ModelConfig
from .encoder_local import patch_count, segment_patches
from .errors import MeasureUnavailable
from .model import build_model

# Activation values kept per token, per layer, in units of d_model: q/k/v (3),
# attention output (1), two layer norms (2), MLP hidden + activation (8),
# two residual sums (2).
ACTIVATION_MULTIPLIER = {
    "pretrained_frozen": 16,
    "trans_encoder": 16,
    "attention_only": 6,
    "identity": 0,
}


@dataclass(frozen=True)
class MemReport:
    mode: str  # "CI" or "TriP"
    sequences: int
    tokens_per_sequence: int
    total_tokens: int
    estimated_bytes: Optional[int] = None
    measured_peak_bytes: Optional[int] = None
    measurement: str = "not run"


def token_counts(config: ModelConfig, mode: str, batch_size: Optional[int] = None,
                 patch_size: Optional[int] = None) -> MemReport:
    """Backbone sequences and tokens for one forward pass.

    CI folds channels into the batch: ``B*M`` sequences of ``l`` tokens for the
    chosen patch size (default: the smallest). TriP: ``B`` sequences of ``l_max``.
    """
    B = batch_size or config.train.batch_size
    if mode == "CI":
        p = patch_size or config.patch_sizes[0]
        seqs, tokens = B * config.channels, patch_count(config.window, p, config.stride)
    elif mode == "TriP":
        seqs, tokens = B, config.l_max
    else:
        raise ValueError(f"mode must be 'CI' or 'TriP', got {mode!r}")
    return MemReport(mode, seqs, tokens, seqs * tokens)


def backbone_weight_count(backbone: Backbone) -> int:
    return sum(p.numel() for p in backbone.parameters())


def activation_estimate(report: MemReport, variant: BackboneVariant, bytes_per_value: int = 4,
                        weight_values: int = 0, layers: Optional[int] = None) -> MemReport:
    """tokens x d_model x layers x multiplier x bytes, plus resident weight bytes.

    ``layers`` defaults to the depth the variant would be built with; pass the
    loaded backbone's ``layer_count`` when a checkpoint decides it.
    """
    if layers is None:
        layers = {"identity": 0, "attention_only": 1}.get(variant.kind, variant.build_layers)
    per_layer = ACTIVATION_MULTIPLIER[variant.kind]
    values = report.total_tokens * variant.d_model * layers * per_layer
    return replace(report, estimated_bytes=(values + weight_values) * bytes_per_value)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

class TorchStorageTracker(TorchDispatchMode):
    """Counts bytes of tensor storages allocated by ops while active and
    keeps the high-water mark. Storages are released when the last tensor
    wrapper referring to them is garbage collected."""

    def __init__(self):
        super().__init__()
        self.live = 0
        self.peak = 0
        self._refs: dict[int, list] = {}

    def _release(self, key: int, nbytes: int, ref) -> None:
        refs = self._refs.get(key)
        if refs is None:
            return
        refs.remove(ref)
        if not refs:
            del self._refs[key]
            self.live -= nbytes

    def _track(self, t: torch.Tensor, input_keys: set[int]) -> None:
        storage = t.untyped_storage()
        key, nbytes = storage.data_ptr(), storage.nbytes()
        if nbytes == 0 or (key in input_keys and key not in self._refs):
            return
        if key not in self._refs:
            self._refs[key] = []
            self.live += nbytes
            self.peak = max(self.peak, self.live)
        ref = weakref.ref(t, lambda r, k=key, n=nbytes: self._release(k, n, r))
        self._refs[key].append(ref)

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        inputs = tree_flatten((args, kwargs or {}))[0]
        keys = {x.untyped_storage().data_ptr() for x in inputs if isinstance(x, torch.Tensor)}
        for t in tree_flatten(out)[0]:
            if isinstance(t, torch.Tensor):
                self._track(t, keys)
        return out


class TorchAllocHook:
    """Peak-tracking hook for torch CPU tensors. ``baseline`` is the resident
    byte count the caller attributes to already-allocated state (e.g. weights)."""

    name = "torch-dispatch"

    def __init__(self, baseline: int = 0):
        self.baseline = baseline
        self._mode: Optional[TorchStorageTracker] = None

    def __enter__(self):
        try:
            self._mode = TorchStorageTracker()
            self._mode.__enter__()
        except Exception as exc:  # pragma: no cover - depends on torch internals
            raise MeasureUnavailable(f"cannot install dispatch hook: {exc}") from exc
        return self

    def __exit__(self, *exc):
        self._mode.__exit__(*exc)
        return False

    @property
    def peak(self) -> int:
        return self.baseline + (self._mode.peak if self._mode else 0)


class TracemallocHook:
    """Python-heap peak via :mod:`tracemalloc` (sees numpy, not torch, buffers)."""

    name = "tracemalloc"

    def __init__(self):
        self.baseline = 0
        self._peak = 0
        self._started = False

    def __enter__(self):
        self._started = not tracemalloc.is_tracing()
        if self._started:
            tracemalloc.start()
        self.baseline, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        return self

    def __exit__(self, *exc):
        _, self._peak = tracemalloc.get_traced_memory()
        if self._started:
            tracemalloc.stop()
        return False

    @property
    def peak(self) -> int:
        return max(self._peak, self.baseline)


def measure_peak(run: Callable[[], object], hook=None) -> int:
    """High-water-mark bytes while ``run()`` executes (baseline included)."""
    hook = hook if hook is not None else TorchAllocHook()
    gc.collect()
    with hook:
        result = run()
        del result
        gc.collect()
    return hook.peak


class CIComparator(nn.Module):
    """Patchify each channel, fold channels into the batch, embed linearly, run the backbone."""

    def __init__(self, patch_size: int, stride: int, backbone: Backbone):
        super().__init__()
        self.patch_size = patch_size
        self.stride = stride
        self.embed = nn.Linear(patch_size, backbone.d_model)
        self.backbone = backbone

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, W, M = x.shape
        flat = x.permute(0, 2, 1).reshape(B * M, W, 1)
        patches = segment_patches(flat, self.patch_size, self.stride).squeeze(-1)  # (B*M, l, p)
        return self.backbone(self.embed(patches))


class TriPEncoderOnly(nn.Module):
    """The TriP model without its decoder, as used for the memory comparison."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.model = build_model(config)

    def forward(self, x):
        return self.model.backbone(self.model.encode(x))


def _measure_forward(module: nn.Module, x: torch.Tensor, hook_factory) -> tuple[int, str]:
    baseline = sum(p.numel() * p.element_size() for p in module.parameters())
    hook = hook_factory(baseline)

    def run():
        with torch.inference_mode():
            return module(x)

    try:
        return measure_peak(run, hook), f"{hook.name}/{platform.machine()}"
    except MeasureUnavailable as exc:
        return 0, f"unavailable: {exc}"


def compare_modes(config: ModelConfig, batch_size: int, patch_size: int, bytes_per_value: int = 4,
                  measure: bool = True, hook_factory=TorchAllocHook, seed: int = 0) -> list[MemReport]:
    """CI and TriP reports for one grid cell, with estimates and optional measurements."""
    cfg = replace(config, patch_sizes=(patch_size,), p_dec=0)
    torch.manual_seed(seed)
    trip = TriPEncoderOnly(cfg).eval()
    backbone = trip.model.backbone
    ci = CIComparator(patch_size, cfg.stride, backbone).eval()
    weights = backbone_weight_count(backbone)

    out = []
    for mode, module in (("CI", ci), ("TriP", trip)):
        report = token_counts(cfg, mode, batch_size, patch_size)
        report = activation_estimate(report, cfg.backbone, bytes_per_value, weights, backbone.layer_count)
        if measure:
            x = torch.randn(batch_size, cfg.window, cfg.channels, generator=torch.Generator().manual_seed(seed))
            peak, tag = _measure_forward(module, x, hook_factory)
            report = replace(report, measured_peak_bytes=peak, measurement=tag)
        out.append(report)
    return out


GRID_FIELDS = ["backbone", "batch_size", "patch_size", "channels", "mode", "sequences",
               "tokens_per_sequence", "total_tokens", "estimated_bytes", "measured_peak_bytes",
               "measurement"]


def membench_grid(base: ModelConfig, backbones, batch_sizes, patch_sizes, channels,
                  bytes_per_value: int = 4, measure: bool = True) -> list[dict]:
    rows = []
    for kind in backbones:
        for B in batch_sizes:
            for p in patch_sizes:
                for M in channels:
                    cfg = replace(base, channels=M, backbone=replace(base.backbone, kind=kind))
                    for r in compare_modes(cfg, B, p, bytes_per_value, measure):
                        rows.append({
                            "backbone": kind, "batch_size": B, "patch_size": p, "channels": M,
                            "mode": r.mode, "sequences": r.sequences,
                            "tokens_per_sequence": r.tokens_per_sequence,
                            "total_tokens": r.total_tokens, "estimated_bytes": r.estimated_bytes,
                            "measured_peak_bytes": "" if r.measured_peak_bytes is None else r.measured_peak_bytes,
                            "measurement": r.measurement,
                        })
    return rows


def grid_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=GRID_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
