"""Flat ``section.key = value`` configuration and the typed model config built from it."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .backbone import BackboneVariant
from .encoder_local import patch_count
from .errors import ConfigError

# Every recognized key with its default; the default's type drives parsing.
DEFAULTS: dict[str, object] = {
    "model.window": 48,
    "model.stride": 1,
    "model.patch_sizes": (8, 16),
    "model.d": 16,
    "model.d_prime": 64,
    "model.channels": 1,
    "model.p_dec": 0,
    "model.decoder": "patchwise",
    "model.use_patching": True,
    "model.use_selection": True,
    "model.use_global": True,
    "model.base_llm": False,
    "model.fusion_kernel": 3,
    "backbone.kind": "pretrained_frozen",
    "backbone.d_model": 64,
    "backbone.layers": 0,  # 0 = full checkpoint stack
    "backbone.heads": 0,  # 0 = d_model // 64
    "backbone.weights_path": "",
    "train.lr": 1e-3,
    "train.epochs": 10,
    "train.batch_size": 16,
    "train.seed": 0,
    "train.window_stride": 1,
    "train.grad_clip": 1.0,
    "train.max_steps": 0,
    "score.stride": 0,
    "score.smooth": 0,
    "score.batch_size": 64,
    "data.train_values": "",
    "data.train_labels": "",
    "data.test_values": "",
    "data.test_labels": "",
    "detect.checkpoint": "",
    "eval.scores": "",
    "eval.labels": "",
    "eval.pre_buffers": (0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20),
    "eval.post_buffers": (0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20),
    "synth.length": 4000,
    "synth.channels": 3,
    "synth.periods": (50.0, 120.0),
    "synth.noise_std": 0.1,
    "synth.spikes": "",
    "synth.spike_magnitude": 6.0,
    "synth.level_shifts": "",
    "synth.shift_magnitude": 3.0,
    "synth.anomaly_ratio": 0.05,
    "membench.batch_sizes": (2, 4, 8, 16),
    "membench.patch_sizes": (8, 16),
    "membench.channels": (25, 51, 55),
    "membench.backbones": ("pretrained_frozen",),
    "membench.bytes_per_value": 4,
    "membench.measure": True,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            elem = type(default[0])
            return tuple(elem(t) for t in items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys are not validated here."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(file_values: Mapping[str, str] | None = None,
                   overrides: Iterable[str] = (), seed: int | None = None) -> dict[str, object]:
    """Defaults <- config file <- ``key=value`` overrides <- explicit seed."""
    raw = dict(file_values or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value
    if seed is not None:
        raw["train.seed"] = str(seed)
    resolved = dict(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        resolved[key] = parse_value(key, value)
    return resolved


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def dump_config(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    window_stride: int = 1
    grad_clip: float = 1.0
    max_steps: int = 0  # 0 = no cap


@dataclass(frozen=True)
class ModelConfig:
    window: int = 48
    stride: int = 1
    patch_sizes: tuple[int, ...] = (8, 16)
    d: int = 16
    d_prime: int = 64
    channels: int = 1
    p_dec: int = 0  # 0 = smallest patch size
    decoder: str = "patchwise"
    use_patching: bool = True
    use_selection: bool = True
    use_global: bool = True
    base_llm: bool = False
    fusion_kernel: int = 3
    backbone: BackboneVariant = field(default_factory=BackboneVariant)
    weights_path: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        ps = tuple(int(p) for p in self.patch_sizes)
        object.__setattr__(self, "patch_sizes", ps)
        if not ps:
            raise ConfigError("patch_sizes must be non-empty")
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ConfigError(f"patch_sizes must be strictly increasing, got {ps}")
        if ps[0] < 1 or ps[-1] > self.window:
            raise ConfigError(f"patch sizes {ps} must lie in [1, window={self.window}]")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.channels < 1 or self.d < 1 or self.d_prime < 1:
            raise ConfigError("channels, d and d_prime must be >= 1")
        if self.decoder not in ("patchwise", "flat"):
            raise ConfigError(f"unknown decoder kind {self.decoder!r}")
        if not self.base_llm and not (self.use_patching or self.use_selection or self.use_global):
            raise ConfigError("at least one branch must be enabled unless base_llm is set")
        if self.p_dec < 0 or self.p_dec > self.window:
            raise ConfigError(f"p_dec {self.p_dec} must lie in [0, window]")

    @property
    def l_max(self) -> int:
        return patch_count(self.window, self.patch_sizes[0], self.stride)

    @property
    def decoder_patch(self) -> int:
        return self.p_dec or self.patch_sizes[0]

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_flat(self) -> dict[str, object]:
        flat = {
            "model.window": self.window,
            "model.stride": self.stride,
            "model.patch_sizes": self.patch_sizes,
            "model.d": self.d,
            "model.d_prime": self.d_prime,
            "model.channels": self.channels,
            "model.p_dec": self.p_dec,
            "model.decoder": self.decoder,
            "model.use_patching": self.use_patching,
            "model.use_selection": self.use_selection,
            "model.use_global": self.use_global,
            "model.base_llm": self.base_llm,
            "model.fusion_kernel": self.fusion_kernel,
            "backbone.kind": self.backbone.kind,
            "backbone.d_model": self.backbone.d_model,
            "backbone.layers": self.backbone.layers,
            "backbone.heads": self.backbone.heads,
            "backbone.weights_path": self.weights_path,
        }
        for name in TrainConfig.__dataclass_fields__:
            flat[f"train.{name}"] = getattr(self.train, name)
        return flat

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> "ModelConfig":
        v = dict(DEFAULTS)
        v.update(flat)
        return cls(
            window=v["model.window"],
            stride=v["model.stride"],
            patch_sizes=tuple(v["model.patch_sizes"]),
            d=v["model.d"],
            d_prime=v["model.d_prime"],
            channels=v["model.channels"],
            p_dec=v["model.p_dec"],
            decoder=v["model.decoder"],
            use_patching=v["model.use_patching"],
            use_selection=v["model.use_selection"],
            use_global=v["model.use_global"],
            base_llm=v["model.base_llm"],
            fusion_kernel=v["model.fusion_kernel"],
            backbone=BackboneVariant(
                v["backbone.kind"], v["backbone.d_model"], v["backbone.layers"], v["backbone.heads"]
            ),
            weights_path=v["backbone.weights_path"],
            train=TrainConfig(**{n: v[f"train.{n}"] for n in TrainConfig.__dataclass_fields__}),
        )
