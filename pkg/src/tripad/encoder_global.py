"""Global branch: causal TCN over the whole window, projection, adaptive max-pooling."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder_local import CausalConv1d, _check_finite
from .errors import ShapeError


def adaptive_bins(length: int, n_bins: int) -> list[tuple[int, int]]:
    """Bin ``i`` covers ``[floor(i*L/n), ceil((i+1)*L/n))``."""
    if not 1 <= n_bins <= length:
        raise ShapeError(f"cannot pool {length} steps into {n_bins} bins")
    return [
        (math.floor(i * length / n_bins), math.ceil((i + 1) * length / n_bins))
        for i in range(n_bins)
    ]


def adaptive_max_pool(x: torch.Tensor, n_bins: int) -> torch.Tensor:
    """Max over time bins of a ``(B, T, C)`` tensor, returning ``(B, n_bins, C)``."""
    if n_bins > x.shape[1]:
        raise ShapeError(f"cannot pool {x.shape[1]} steps into {n_bins} bins")
    # same floor/ceil tiling as adaptive_bins
    return F.adaptive_max_pool1d(x.transpose(1, 2), n_bins).transpose(1, 2)


class TemporalBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, dilation: int, kernel_size: int = 3):
        super().__init__()
        self.conv = CausalConv1d(in_channels, out_channels, kernel_size, dilation=dilation)
        self.downsample = nn.Conv1d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x):
        res = x if self.downsample is None else self.downsample(x)
        return res + F.gelu(self.conv(x))


class GlobalBranch(nn.Module):
    """TCN (dilations 1, 2, 4) -> Linear to d -> adaptive max-pool to ``l_max`` tokens."""

    def __init__(self, n_channels: int, d: int, hidden: int | None = None,
                 dilations=(1, 2, 4), kernel_size: int = 3):
        super().__init__()
        hidden = hidden or d
        widths = [n_channels] + [hidden] * len(dilations)
        self.tcn = nn.Sequential(*[
            TemporalBlock(widths[i], widths[i + 1], dil, kernel_size) for i, dil in enumerate(dilations)
        ])
        self.proj = nn.Linear(hidden, d)
        self.n_channels = n_channels
        self.d = d

    def forward(self, window: torch.Tensor, l_max: int) -> torch.Tensor:
        if window.dim() != 3 or window.shape[2] != self.n_channels:
            raise ShapeError(f"global branch built for M={self.n_channels}, got {tuple(window.shape)}")
        h = self.tcn(window.transpose(1, 2)).transpose(1, 2)  # (B, W, hidden)
        out = adaptive_max_pool(self.proj(h), l_max)
        return _check_finite(out, "global branch")
