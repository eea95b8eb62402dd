"""Reconstruction heads: shared patch-wise MLP with overlap averaging, and a flat head."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError


def coverage_counts(n_patches: int, patch_size: int, stride: int, window: int) -> torch.Tensor:
    """How many decoded patches touch each timestep (spans are clipped to the window)."""
    cov = torch.zeros(window, dtype=torch.long)
    for i in range(n_patches):
        cov[i * stride:min(i * stride + patch_size, window)] += 1
    return cov


def overlap_average(patches: torch.Tensor, stride: int, window: int) -> torch.Tensor:
    """Merge ``(B, n, p, M)`` patches placed at ``i * stride`` into ``(B, W, M)``
    by averaging every value that lands on the same timestep."""
    B, n, p, M = patches.shape
    cov = coverage_counts(n, p, stride, window)
    if (cov == 0).any():
        gap = int(torch.nonzero(cov == 0)[0])
        raise ConfigError(f"decoded patches leave timestep {gap} of {window} uncovered")
    out = patches.new_zeros(B, window, M)
    starts = torch.arange(n) * stride
    # one index_add per intra-patch offset: indices are unique within a call,
    # so the summation order per timestep is fixed
    for j in range(p):
        pos = starts + j
        keep = pos < window
        out = out.index_add(1, pos[keep], patches[:, keep, j, :])
    return out / cov.to(patches.dtype).view(1, window, 1)


class PatchwiseDecoder(nn.Module):
    """One MLP shared by all tokens, each token decoded to a ``(p_dec, M)`` patch."""

    def __init__(self, d_model: int, patch_size: int, stride: int, window: int,
                 n_channels: int, n_tokens: int):
        super().__init__()
        if (n_tokens - 1) * stride + patch_size < window:
            raise ConfigError(
                f"{n_tokens} tokens of size {patch_size} at stride {stride} cannot cover window {window}"
            )
        hidden = max(d_model // 2, 1)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, hidden), nn.GELU(), nn.Linear(hidden, patch_size * n_channels)
        )
        self.patch_size = patch_size
        self.stride = stride
        self.window = window
        self.n_channels = n_channels
        self.n_tokens = n_tokens
        self.d_model = d_model
        self.register_buffer("coverage", coverage_counts(n_tokens, patch_size, stride, window),
                             persistent=False)

    def decode_patches(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[-1] != self.d_model:
            raise ShapeError(f"decoder expects (B, l, {self.d_model}) tokens, got {tuple(tokens.shape)}")
        B, n, _ = tokens.shape
        return self.mlp(tokens).reshape(B, n, self.patch_size, self.n_channels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.n_tokens:
            raise ShapeError(f"decoder built for {self.n_tokens} tokens, got {tokens.shape[1]}")
        return overlap_average(self.decode_patches(tokens), self.stride, self.window)


class FlatDecoder(nn.Module):
    """Flattened-head decoder: all tokens -> one linear map -> ``(W, M)``."""

    def __init__(self, d_model: int, window: int, n_channels: int, n_tokens: int):
        super().__init__()
        self.head = nn.Linear(n_tokens * d_model, window * n_channels)
        self.window = window
        self.n_channels = n_channels
        self.n_tokens = n_tokens
        self.d_model = d_model
        self.register_buffer("coverage", torch.ones(window, dtype=torch.long), persistent=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tuple(tokens.shape[1:]) != (self.n_tokens, self.d_model):
            raise ShapeError(
                f"flat decoder expects (B, {self.n_tokens}, {self.d_model}), got {tuple(tokens.shape)}"
            )
        return self.head(tokens.flatten(1)).view(-1, self.window, self.n_channels)
