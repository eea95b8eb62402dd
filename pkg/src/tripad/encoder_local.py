"""Patch segmentation, the Patching and Selection branches, and multi-scale fusion.

Tensor layout conventions::

    window   (B, W, M)
    patches  (B, l, p, M)        l = (W - p) // s + 1
    features (B, l, M * d)
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericsError, ShapeError, SizeError


def patch_count(window: int, patch_size: int, stride: int) -> int:
    return (window - patch_size) // stride + 1


def segment_patches(window: torch.Tensor, patch_size: int, stride: int) -> torch.Tensor:
    """Overlapping patch view ``(B, l, p, M)`` of a ``(B, W, M)`` window batch."""
    if stride < 1:
        raise ConfigError(f"patch stride must be >= 1, got {stride}")
    if window.dim() != 3:
        raise ShapeError(f"expected (B, W, M) window, got shape {tuple(window.shape)}")
    if not 1 <= patch_size <= window.shape[1]:
        raise SizeError(f"patch size {patch_size} does not fit window length {window.shape[1]}")
    # unfold -> (B, l, M, p)
    return window.unfold(1, patch_size, stride).permute(0, 1, 3, 2)


class CausalConv1d(nn.Conv1d):
    """Conv1d left-padded so the output at position t only sees inputs <= t."""

    def __init__(self, in_channels, out_channels, kernel_size=3, dilation=1, groups=1):
        super().__init__(in_channels, out_channels, kernel_size, dilation=dilation, groups=groups)
        self.left_pad = (kernel_size - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left_pad, 0)))


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite activation in {where}")
    return x


class PatchingBranch(nn.Module):
    """Causal dilated convs inside each patch, depth-wise conv, projection to d,
    patch-mean residual and LayerNorm. Output ``(B, l, M*d)``."""

    def __init__(self, patch_size: int, n_channels: int, d: int, kernel_size: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.n_channels = n_channels
        self.d = d
        self.causal1 = CausalConv1d(n_channels, n_channels, kernel_size, dilation=1)
        self.causal2 = CausalConv1d(n_channels, n_channels, kernel_size, dilation=2)
        self.depthwise = CausalConv1d(n_channels, n_channels, kernel_size, groups=n_channels)
        self.proj = nn.Linear(patch_size, d)
        self.norm = nn.LayerNorm(d)

    def conv_stack(self, patches: torch.Tensor) -> torch.Tensor:
        """Causal conv activations ``(B*l, M, p)`` for ``(B, l, p, M)`` patches."""
        B, l, p, M = patches.shape
        x = patches.reshape(B * l, p, M).transpose(1, 2)
        x = F.gelu(self.causal1(x))
        x = self.causal2(x)
        return self.depthwise(x)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        B, l, p, M = patches.shape
        if p != self.patch_size or M != self.n_channels:
            raise ShapeError(
                f"patching branch built for p={self.patch_size}, M={self.n_channels}; got p={p}, M={M}"
            )
        h = self.proj(self.conv_stack(patches))  # (B*l, M, d)
        mean = patches.mean(dim=2).reshape(B * l, M, 1)
        out = self.norm(h + mean)
        return _check_finite(out.reshape(B, l, M * self.d), "patching branch")


class SelectionState(NamedTuple):
    attention: torch.Tensor  # (B, l), softmax over patches
    raw_scores: torch.Tensor  # (B, l), channel-pooled scores
    tau: torch.Tensor  # scalar in [0, 1]


class SelectionBranch(nn.Module):
    """Soft attention over patches driven by a small scoring MLP.

    When ``use_patching_input`` is False the additive modulation from the
    Patching Branch is skipped and the raw patches are scored directly.
    """

    def __init__(self, patch_size: int, n_channels: int, d: int, use_patching_input: bool = True):
        super().__init__()
        self.patch_size = patch_size
        self.n_channels = n_channels
        self.d = d
        self.use_patching_input = use_patching_input
        if use_patching_input:
            self.align = nn.Conv1d(n_channels * d, patch_size * n_channels, 3, padding=1)
        hidden = max(patch_size // 2, 1)
        self.score_mlp = nn.Sequential(nn.Linear(patch_size, hidden), nn.GELU(), nn.Linear(hidden, 1))
        self.tau_raw = nn.Parameter(torch.zeros(()))
        self.proj = nn.Linear(patch_size * n_channels, n_channels * d)

    @property
    def tau(self) -> torch.Tensor:
        return torch.sigmoid(self.tau_raw)

    def modulate(self, patches: torch.Tensor, f_p: torch.Tensor | None) -> torch.Tensor:
        if not self.use_patching_input:
            return patches
        B, l, p, M = patches.shape
        if f_p is None or f_p.shape != (B, l, M * self.d):
            got = None if f_p is None else tuple(f_p.shape)
            raise ShapeError(f"patching feature {got} does not match patches {(B, l, p, M)}")
        aligned = self.align(f_p.transpose(1, 2)).transpose(1, 2)
        return patches + aligned.reshape(B, l, p, M)

    def channel_scores(self, modulated: torch.Tensor) -> torch.Tensor:
        """Per-channel patch scores ``(B, l, M)``."""
        return self.score_mlp(modulated.transpose(2, 3)).squeeze(-1)

    def pool_scores(self, scores: torch.Tensor) -> torch.Tensor:
        tau = self.tau
        return tau * scores.amax(dim=-1) + (1 - tau) * scores.mean(dim=-1)

    def forward(self, patches: torch.Tensor, f_p: torch.Tensor | None = None):
        B, l, p, M = patches.shape
        if p != self.patch_size or M != self.n_channels:
            raise ShapeError(
                f"selection branch built for p={self.patch_size}, M={self.n_channels}; got p={p}, M={M}"
            )
        modulated = self.modulate(patches, f_p)
        raw = self.pool_scores(self.channel_scores(modulated))
        alpha = torch.softmax(raw, dim=1)
        out = alpha.unsqueeze(-1) * self.proj(modulated.reshape(B, l, p * M))
        return _check_finite(out, "selection branch"), SelectionState(alpha, raw, self.tau)


def upsample_tokens(feature: torch.Tensor, l_max: int) -> torch.Tensor:
    """Linear interpolation along the token axis, endpoints preserved."""
    l_k = feature.shape[1]
    if l_k > l_max:
        raise ShapeError(f"cannot down-sample {l_k} tokens to {l_max}")
    if l_k == l_max:
        return feature
    if l_k == 1:
        return feature.expand(-1, l_max, -1)
    out = F.interpolate(feature.transpose(1, 2), size=l_max, mode="linear", align_corners=True)
    return out.transpose(1, 2)


def scale_weights(ste_upsampled: Sequence[torch.Tensor]) -> torch.Tensor:
    """Softmax over scales of each scale's mean selection feature, ``(B, S)``."""
    means = torch.stack([f.mean(dim=(1, 2)) for f in ste_upsampled], dim=1)
    return torch.softmax(means, dim=1)


def multiscale_fuse(per_scale, l_max: int):
    """Fuse ``[(F_p^k, F_ste^k), ...]`` across patch scales.

    Either member of a pair may be ``None`` (a pruned branch). Without
    selection features the scales are weighted uniformly.
    Returns ``(F_p_hat, F_ste_hat, weights)``; pruned outputs are ``None``.
    """
    if not per_scale:
        raise ConfigError("multiscale fusion needs at least one scale")
    p_up = [None if f is None else upsample_tokens(f, l_max) for f, _ in per_scale]
    s_up = [None if f is None else upsample_tokens(f, l_max) for _, f in per_scale]
    for group in (p_up, s_up):
        dims = {f.shape[2] for f in group if f is not None}
        if len(dims) > 1:
            raise ShapeError(f"inconsistent feature widths across scales: {sorted(dims)}")

    if all(f is not None for f in s_up):
        weights = scale_weights(s_up)
    else:
        ref = next(f for f in p_up + s_up if f is not None)
        n = len(per_scale)
        weights = ref.new_full((ref.shape[0], n), 1.0 / n)

    def combine(group):
        if any(f is None for f in group):
            return None
        return sum(weights[:, k, None, None] * f for k, f in enumerate(group))

    return combine(p_up), combine(s_up), weights
