"""Assembly of the full reconstruction model and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .backbone import Backbone, build_backbone
from .config import ModelConfig
from .decoder import FlatDecoder, PatchwiseDecoder
from .encoder_global import GlobalBranch
from .encoder_local import (PatchingBranch, SelectionBranch, multiscale_fuse,
                            segment_patches)
from .errors import ShapeError
from .gate_fusion import GateFusion


@dataclass
class ForwardDetails:
    tokens: torch.Tensor
    hidden: torch.Tensor
    recon: torch.Tensor
    alphas: list = field(default_factory=list)
    scale_weights: torch.Tensor | None = None
    beta: torch.Tensor | None = None


class TriPModel(nn.Module):
    """Tri-branch encoder -> gate fusion -> backbone -> decoder.

    With ``base_llm`` the branches are replaced by one linear map from each
    smallest-scale patch to a backbone token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        M, d, d_model = c.channels, c.d, c.backbone.d_model
        l_max = c.l_max
        torch.manual_seed(c.train.seed)

        if c.base_llm:
            self.input_proj = nn.Linear(c.patch_sizes[0] * M, d_model)
        else:
            if c.use_patching:
                self.patching = nn.ModuleList([PatchingBranch(p, M, d) for p in c.patch_sizes])
            if c.use_selection:
                self.selection = nn.ModuleList([
                    SelectionBranch(p, M, d, use_patching_input=c.use_patching) for p in c.patch_sizes
                ])
            if c.use_global:
                self.global_branch = GlobalBranch(M, d)
            in_dims = {}
            if c.use_patching:
                in_dims["patching"] = M * d
            if c.use_selection:
                in_dims["selection"] = M * d
            if c.use_global:
                in_dims["global"] = d
            self.fusion = GateFusion(in_dims, c.d_prime, d_model, c.fusion_kernel)

        if c.decoder == "flat":
            self.decoder = FlatDecoder(d_model, c.window, M, l_max)
        else:
            self.decoder = PatchwiseDecoder(d_model, c.decoder_patch, c.stride, c.window, M, l_max)

        # the backbone draws from its own RNG stream so every variant shares
        # the same initial encoder/decoder weights for a given seed
        with torch.random.fork_rng():
            torch.manual_seed(c.train.seed + 1)
            self.backbone: Backbone = build_backbone(c.backbone, c.weights_path or None, c.train.seed)

    @property
    def l_max(self) -> int:
        return self.config.l_max

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def _check_input(self, x: torch.Tensor) -> None:
        c = self.config
        if x.dim() != 3 or x.shape[1] != c.window or x.shape[2] != c.channels:
            raise ShapeError(f"model expects (B, {c.window}, {c.channels}) windows, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor, details: ForwardDetails | None = None) -> torch.Tensor:
        c = self.config
        if c.base_llm:
            patches = segment_patches(x, c.patch_sizes[0], c.stride)
            B, l, p, M = patches.shape
            return self.input_proj(patches.reshape(B, l, p * M))

        per_scale = []
        for k, p in enumerate(c.patch_sizes):
            patches = segment_patches(x, p, c.stride)
            f_p = self.patching[k](patches) if c.use_patching else None
            f_ste = None
            if c.use_selection:
                f_ste, state = self.selection[k](patches, f_p)
                if details is not None:
                    details.alphas.append(state.attention)
            per_scale.append((f_p, f_ste))

        features = {}
        if c.use_patching or c.use_selection:
            f_p_hat, f_ste_hat, weights = multiscale_fuse(per_scale, self.l_max)
            if details is not None:
                details.scale_weights = weights
            if c.use_patching:
                features["patching"] = f_p_hat
            if c.use_selection:
                features["selection"] = f_ste_hat
        if c.use_global:
            features["global"] = self.global_branch(x, self.l_max)
        tokens, beta = self.fusion(features)
        if details is not None:
            details.beta = beta
        return tokens

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.decoder(self.backbone(self.encode(x)))

    def forward_details(self, x: torch.Tensor) -> ForwardDetails:
        self._check_input(x)
        details = ForwardDetails(None, None, None)
        details.tokens = self.encode(x, details)
        details.hidden = self.backbone(details.tokens)
        details.recon = self.decoder(details.hidden)
        return details


def build_model(config: ModelConfig) -> TriPModel:
    return TriPModel(config)


ABLATIONS = {
    "TriP-LLM": {},
    "w/o Selection": {"use_selection": False},
    "w/o Patching": {"use_patching": False},
    "w/o Global": {"use_global": False},
    "Base LLM": {"base_llm": True},
    "Seq-decoder": {"decoder": "flat"},
    "Remove LLM": {"backbone_kind": "identity"},
    "LLM2Trans": {"backbone_kind": "trans_encoder"},
    "LLM2Atten": {"backbone_kind": "attention_only"},
}


def ablation_config(base: ModelConfig, name: str) -> ModelConfig:
    """The named ablation variant of ``base`` (keys of :data:`ABLATIONS`)."""
    changes = dict(ABLATIONS[name])
    kind = changes.pop("backbone_kind", None)
    if kind is not None:
        changes["backbone"] = replace(base.backbone, kind=kind)
        changes["weights_path"] = ""
    return replace(base, **changes)
