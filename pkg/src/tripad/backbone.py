"""Token-sequence backbones: frozen GPT-2-family decoder and its ablation substitutes.

Every backbone maps ``(B, l, d_model)`` continuous tokens to hidden states of
the same shape. The pretrained decoder bypasses the tokenizer and LM head.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import content_hash, read_archive
from .errors import CheckpointError, ConfigError, ShapeError

log = logging.getLogger(__name__)

KINDS = ("pretrained_frozen", "trans_encoder", "attention_only", "identity")
DEFAULT_LAYERS = 2  # stand-in and substitute depth when ``layers`` is 0


@dataclass(frozen=True)
class BackboneVariant:
    """``layers = 0`` keeps every block of a loaded checkpoint (``DEFAULT_LAYERS``
    for built-from-scratch stacks); ``heads = 0`` means the GPT-2 head width of 64."""

    kind: str = "pretrained_frozen"
    d_model: int = 64
    layers: int = 0
    heads: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.d_model < 1 or self.layers < 0 or self.heads < 0:
            raise ConfigError("backbone d_model must be >= 1 and layers, heads >= 0")
        if self.kind != "identity" and self.d_model % self.build_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.build_heads} heads")

    @property
    def build_layers(self) -> int:
        return self.layers or DEFAULT_LAYERS

    @property
    def build_heads(self) -> int:
        return self.heads or max(self.d_model // 64, 1)


class Backbone(nn.Module):
    kind = "identity"

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model

    @property
    def layer_count(self) -> int:
        return 0

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().cpu().numpy()
            for name, p in self.named_parameters()
            if not p.requires_grad
        }

    def fingerprint(self) -> int:
        return parameter_fingerprint(self)

    def check_width(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 3 or tokens.shape[-1] != self.d_model:
            raise ShapeError(f"{self.kind} backbone expects width {self.d_model}, got {tuple(tokens.shape)}")


def parameter_fingerprint(backbone: Backbone) -> int:
    """Content hash of the frozen tensors; the empty set hashes to a fixed sentinel."""
    return content_hash(backbone.frozen_tensors())


class IdentityBackbone(Backbone):
    kind = "identity"

    def forward(self, tokens):
        return tokens


class AttentionBackbone(Backbone):
    """One pre-norm multi-head self-attention block with a residual connection."""

    kind = "attention_only"

    def __init__(self, d_model: int, heads: int):
        super().__init__(d_model)
        self.norm = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, dropout=0.0, batch_first=True)

    @property
    def layer_count(self) -> int:
        return 1

    def forward(self, tokens):
        self.check_width(tokens)
        h = self.norm(tokens)
        out, _ = self.attn(h, h, h, need_weights=False)
        return tokens + out


class TransformerEncoderBackbone(Backbone):
    kind = "trans_encoder"

    def __init__(self, d_model: int, layers: int, heads: int):
        super().__init__(d_model)
        layer = nn.TransformerEncoderLayer(
            d_model, heads, dim_feedforward=4 * d_model, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self._layers = layers

    @property
    def layer_count(self) -> int:
        return self._layers

    def forward(self, tokens):
        self.check_width(tokens)
        return self.encoder(tokens)


# ---------------------------------------------------------------------------
# GPT-2 family decoder
# ---------------------------------------------------------------------------

class _Conv1D(nn.Module):
    """GPT-2's transposed linear: ``weight`` is stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_in, n_out))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x):
        return torch.addmm(self.bias, x.reshape(-1, x.shape[-1]), self.weight).reshape(*x.shape[:-1], -1)


class _Attention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.c_attn = _Conv1D(d_model, 3 * d_model)
        self.c_proj = _Conv1D(d_model, d_model)
        self.heads = heads

    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.c_attn(x).split(C, dim=2)
        q, k, v = (t.view(B, T, self.heads, C // self.heads).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.c_proj(y.transpose(1, 2).reshape(B, T, C))


class _MLP(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.c_fc = _Conv1D(d_model, 4 * d_model)
        self.c_proj = _Conv1D(4 * d_model, d_model)

    def forward(self, x):
        return self.c_proj(F.gelu(self.c_fc(x), approximate="tanh"))


class _Block(nn.Module):
    def __init__(self, d_model: int, heads: int, eps: float):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model, eps=eps)
        self.attn = _Attention(d_model, heads)
        self.ln_2 = nn.LayerNorm(d_model, eps=eps)
        self.mlp = _MLP(d_model)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class GPT2Backbone(Backbone):
    """GPT-2 decoder stack fed with continuous embeddings; all weights frozen."""

    kind = "pretrained_frozen"

    def __init__(self, d_model: int, layers: int, heads: int, n_positions: int, eps: float = 1e-5):
        super().__init__(d_model)
        if d_model % heads:
            raise CheckpointError(f"d_model {d_model} is not divisible by {heads} heads")
        self.wpe = nn.Embedding(n_positions, d_model)
        self.h = nn.ModuleList([_Block(d_model, heads, eps) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(d_model, eps=eps)
        self.heads = heads

    @property
    def layer_count(self) -> int:
        return len(self.h)

    @property
    def n_positions(self) -> int:
        return self.wpe.num_embeddings

    def freeze(self) -> "GPT2Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def forward(self, tokens):
        self.check_width(tokens)
        T = tokens.shape[1]
        if T > self.n_positions:
            raise ShapeError(f"{T} tokens exceed the {self.n_positions} learned positions")
        x = tokens + self.wpe.weight[:T]
        for block in self.h:
            x = block(x)
        return self.ln_f(x)


_LAYER_KEY = re.compile(r"^h\.(\d+)\.")
_IGNORED = re.compile(r"(^wte\.|^lm_head\.|\.attn\.bias$|\.attn\.masked_bias$)")


def _canonical_gpt2_state(tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    state = {}
    for name, value in tensors.items():
        if name.startswith("transformer."):
            name = name[len("transformer."):]
        if _IGNORED.search(name):
            continue
        state[name] = value
    return state


def gpt2_from_state(tensors: Mapping[str, np.ndarray], expected_d_model: Optional[int] = None,
                    heads: Optional[int] = None, layers: Optional[int] = None) -> GPT2Backbone:
    """Build a frozen :class:`GPT2Backbone` from GPT-2-named tensors.

    ``layers`` keeps only the first N blocks (``None`` or 0 keeps all).
    ``heads`` defaults to ``d_model // 64``, the GPT-2 family head width.
    """
    state = _canonical_gpt2_state(tensors)
    if "wpe.weight" not in state:
        raise CheckpointError("missing tensor 'wpe.weight'")
    n_positions, d_model = state["wpe.weight"].shape
    if expected_d_model is not None and d_model != expected_d_model:
        raise CheckpointError(f"checkpoint hidden width {d_model} != expected d_model {expected_d_model}")
    available = {int(m.group(1)) for k in state if (m := _LAYER_KEY.match(k))}
    n_layers = max(available) + 1 if available else 0
    if layers:
        if layers > n_layers:
            raise CheckpointError(f"requested {layers} layers, checkpoint has {n_layers}")
        n_layers = layers
    if heads is None or heads <= 0:
        heads = max(d_model // 64, 1)

    model = GPT2Backbone(d_model, n_layers, heads, n_positions)
    expected = model.state_dict()
    for name in expected:
        if name not in state:
            raise CheckpointError(f"missing tensor {name!r}")
        if tuple(state[name].shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(state[name].shape)}, expected {tuple(expected[name].shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(np.array(state[k], dtype=np.float32)) for k in expected})
    return model.freeze().eval()


def load_pretrained(weights_path, expected_d_model: Optional[int] = None,
                    heads: Optional[int] = None, layers: Optional[int] = None) -> GPT2Backbone:
    tensors, meta = read_archive(weights_path)
    if heads is None and "n_head" in meta:
        heads = int(meta["n_head"])
    return gpt2_from_state(tensors, expected_d_model, heads, layers)


def random_gpt2_state(d_model: int = 64, layers: int = 2, n_positions: int = 1024,
                      seed: int = 0) -> dict[str, np.ndarray]:
    """GPT-2-named tensors drawn with GPT-2's init scheme; a frozen random stand-in."""
    rng = np.random.default_rng(seed)

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    state = {"wpe.weight": normal(n_positions, d_model, std=0.01)}
    proj_std = 0.02 / np.sqrt(2 * max(layers, 1))
    for i in range(layers):
        pre = f"h.{i}."
        state.update({
            pre + "ln_1.weight": np.ones(d_model, np.float32),
            pre + "ln_1.bias": np.zeros(d_model, np.float32),
            pre + "attn.c_attn.weight": normal(d_model, 3 * d_model),
            pre + "attn.c_attn.bias": np.zeros(3 * d_model, np.float32),
            pre + "attn.c_proj.weight": normal(d_model, d_model, std=proj_std),
            pre + "attn.c_proj.bias": np.zeros(d_model, np.float32),
            pre + "ln_2.weight": np.ones(d_model, np.float32),
            pre + "ln_2.bias": np.zeros(d_model, np.float32),
            pre + "mlp.c_fc.weight": normal(d_model, 4 * d_model),
            pre + "mlp.c_fc.bias": np.zeros(4 * d_model, np.float32),
            pre + "mlp.c_proj.weight": normal(4 * d_model, d_model, std=proj_std),
            pre + "mlp.c_proj.bias": np.zeros(d_model, np.float32),
        })
    state["ln_f.weight"] = np.ones(d_model, np.float32)
    state["ln_f.bias"] = np.zeros(d_model, np.float32)
    return state


def build_backbone(variant: BackboneVariant, weights_path: Optional[str] = None,
                   seed: int = 0) -> Backbone:
    """Instantiate a backbone variant.

    ``pretrained_frozen`` without a weights path falls back to a seeded
    random GPT-2 stand-in (frozen all the same).
    """
    if variant.kind == "identity":
        return IdentityBackbone(variant.d_model)
    if variant.kind == "attention_only":
        return AttentionBackbone(variant.d_model, variant.build_heads)
    if variant.kind == "trans_encoder":
        return TransformerEncoderBackbone(variant.d_model, variant.build_layers, variant.build_heads)
    if weights_path:
        return load_pretrained(weights_path, variant.d_model, variant.heads or None, variant.layers or None)
    log.warning("no backbone weights given; using a frozen random GPT-2 stand-in (seed %d)", seed)
    state = random_gpt2_state(variant.d_model, variant.build_layers, seed=seed)
    return gpt2_from_state(state, variant.d_model, variant.build_heads)
