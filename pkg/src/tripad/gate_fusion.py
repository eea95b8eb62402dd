"""Gate-modulated fusion of the branch features into backbone-width tokens."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .encoder_local import _check_finite
from .errors import ConfigError, ShapeError

BRANCHES = ("patching", "selection", "global")


class GateFusion(nn.Module):
    """Project each active branch to ``D'`` with one shared LayerNorm, gate the
    projections per token with a softmax, and map the mixture to ``d_model``
    with a token-axis convolution.

    ``in_dims`` maps branch name -> input width, in ``BRANCHES`` order. A
    branch missing from ``in_dims`` has no gate slot, so the softmax
    renormalizes over the survivors.
    """

    def __init__(self, in_dims: dict[str, int], d_prime: int, d_model: int, kernel_size: int = 3):
        super().__init__()
        self.branches = [b for b in BRANCHES if b in in_dims]
        if not self.branches:
            raise ConfigError("gate fusion needs at least one branch")
        if kernel_size % 2 != 1:
            raise ConfigError("output convolution kernel must be odd for same-padding")
        self.proj = nn.ModuleDict({b: nn.Linear(in_dims[b], d_prime) for b in self.branches})
        self.norm = nn.LayerNorm(d_prime)
        self.gate = nn.Linear(len(self.branches) * d_prime, len(self.branches))
        self.out = nn.Conv1d(d_prime, d_model, kernel_size, padding=kernel_size // 2)
        self.d_prime = d_prime
        self.d_model = d_model

    def project_branches(self, features: dict[str, torch.Tensor]) -> list[torch.Tensor]:
        counts = {tuple(features[b].shape[:2]) for b in self.branches}
        if len(counts) != 1:
            raise ShapeError(f"branch token counts disagree: {sorted(counts)}")
        return [self.norm(self.proj[b](features[b])) for b in self.branches]

    def gate_weights(self, projected: Sequence[torch.Tensor]) -> torch.Tensor:
        """Per-token convex weights ``(B, l, n_branches)``."""
        return torch.softmax(self.gate(torch.cat(list(projected), dim=-1)), dim=-1)

    def mix(self, projected: Sequence[torch.Tensor]):
        shapes = {tuple(p.shape) for p in projected}
        if len(shapes) != 1:
            raise ShapeError(f"projected features differ in shape: {sorted(shapes)}")
        beta = self.gate_weights(projected)
        fused = sum(beta[..., i:i + 1] * p for i, p in enumerate(projected))
        return fused, beta

    def forward(self, features: dict[str, torch.Tensor]):
        """Returns ``(tokens (B, l, d_model), beta (B, l, n_branches))``."""
        fused, beta = self.mix(self.project_branches(features))
        tokens = self.out(fused.transpose(1, 2)).transpose(1, 2)
        return _check_finite(tokens, "gate fusion"), beta
