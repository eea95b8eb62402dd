import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tripad.encoder_local import (PatchingBranch, SelectionBranch, multiscale_fuse, patch_count,
                                  scale_weights, segment_patches, upsample_tokens)
from tripad.errors import ConfigError, ShapeError, SizeError


def _patches(B, W, M, p, s, seed=0):
    g = torch.Generator().manual_seed(seed)
    return segment_patches(torch.randn(B, W, M, generator=g, dtype=torch.float64), p, s)


@pytest.mark.parametrize("p, l", [(8, 41), (16, 33)])
def test_patch_count_examples(p, l):
    assert patch_count(48, p, 1) == l
    assert segment_patches(torch.zeros(2, 48, 3), p, 1).shape == (2, l, p, 3)


def test_full_width_patch_is_the_window():
    x = torch.randn(2, 12, 3)
    patches = segment_patches(x, 12, 1)
    assert patches.shape == (2, 1, 12, 3)
    assert torch.equal(patches[:, 0], x)


@settings(max_examples=80, deadline=None)
@given(W=st.integers(1, 60), p=st.integers(1, 60), s=st.integers(1, 8))
def test_patch_count_property(W, p, s):
    x = torch.arange(W, dtype=torch.float64).view(1, W, 1)
    if p > W:
        with pytest.raises(SizeError):
            segment_patches(x, p, s)
        return
    patches = segment_patches(x, p, s)
    assert patches.shape[1] == (W - p) // s + 1 == patch_count(W, p, s)
    for i in range(patches.shape[1]):
        assert patches[0, i, :, 0].tolist() == list(range(i * s, i * s + p))


def test_segment_errors():
    with pytest.raises(ConfigError):
        segment_patches(torch.zeros(1, 8, 1), 4, 0)
    with pytest.raises(ShapeError):
        segment_patches(torch.zeros(8, 1), 4, 1)


def test_patching_branch_matches_scalar_oracle():
    torch.manual_seed(0)
    branch = PatchingBranch(4, 2, 3).double()
    with torch.no_grad():
        branch.norm.weight.uniform_(0.5, 1.5)
        branch.norm.bias.uniform_(-0.5, 0.5)
    patches = _patches(1, 5, 2, 4, 1)  # l = 2
    out = branch(patches)
    assert out.shape == (1, 2, 6)
    np.testing.assert_allclose(out.detach().numpy(), oracles.patching_branch(branch, patches), atol=1e-6)


def _zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_patching_zero_path_gives_zeros():
    branch = PatchingBranch(4, 2, 3)
    _zero_(branch)
    out = branch(torch.zeros(1, 3, 4, 2))
    assert torch.equal(out, torch.zeros(1, 3, 6))


def test_patching_constant_patch_is_pure_mean_residual():
    branch = PatchingBranch(4, 2, 3).double()
    _zero_(branch)
    patches = torch.full((1, 2, 4, 2), 2.5, dtype=torch.float64)
    B, l, p, M = patches.shape
    pre_ln = branch.proj(branch.conv_stack(patches)) + patches.mean(dim=2).reshape(B * l, M, 1)
    assert torch.equal(pre_ln, torch.full_like(pre_ln, 2.5))


@settings(max_examples=30, deadline=None)
@given(j=st.integers(0, 7), seed=st.integers(0, 10_000))
def test_patching_convs_are_causal(j, seed):
    torch.manual_seed(seed)
    branch = PatchingBranch(8, 3, 4).double()
    patches = _patches(2, 10, 3, 8, 1, seed)
    perturbed = patches.clone()
    perturbed[:, :, j:, :] += torch.randn_like(perturbed[:, :, j:, :])
    a, b = branch.conv_stack(patches), branch.conv_stack(perturbed)
    assert torch.equal(a[..., :j], b[..., :j])


def test_selection_pooling_example():
    branch = SelectionBranch(4, 2, 3)
    assert float(branch.tau.detach()) == 0.5
    pooled = branch.pool_scores(torch.tensor([[[1.0, 3.0]]]))
    assert float(pooled.detach()) == 2.5


def test_selection_matches_scalar_oracle():
    torch.manual_seed(1)
    patching = PatchingBranch(4, 2, 3).double()
    branch = SelectionBranch(4, 2, 3).double()
    with torch.no_grad():
        branch.tau_raw.fill_(0.7)
    patches = _patches(2, 9, 2, 4, 1, 3)
    f_p = patching(patches)
    out, state = branch(patches, f_p)
    ref_out, ref_alpha = oracles.selection_branch(branch, patches, f_p)
    np.testing.assert_allclose(out.detach().numpy(), ref_out, atol=1e-6)
    np.testing.assert_allclose(state.attention.detach().numpy(), ref_alpha, atol=1e-6)


def test_selection_without_patching_input_matches_oracle():
    torch.manual_seed(2)
    branch = SelectionBranch(4, 3, 2, use_patching_input=False).double()
    patches = _patches(1, 8, 3, 4, 2, 4)
    out, state = branch(patches)
    ref_out, ref_alpha = oracles.selection_branch(branch, patches, None)
    np.testing.assert_allclose(out.detach().numpy(), ref_out, atol=1e-6)


def test_selection_single_patch_has_unit_attention():
    branch = SelectionBranch(6, 2, 3, use_patching_input=False)
    _, state = branch(torch.randn(3, 1, 6, 2))
    assert torch.equal(state.attention, torch.ones(3, 1))


def test_selection_identical_scores_give_uniform_attention():
    branch = SelectionBranch(4, 2, 3, use_patching_input=False).double()
    patches = torch.randn(1, 1, 4, 2, dtype=torch.float64).expand(1, 5, 4, 2)
    out, state = branch(patches)
    assert torch.allclose(state.attention, torch.full((1, 5), 0.2, dtype=torch.float64), atol=1e-12)
    expected = branch.proj(patches.reshape(1, 5, 8)) / 5
    assert torch.allclose(out, expected, atol=1e-12)


def test_selection_shape_mismatch():
    branch = SelectionBranch(4, 2, 3)
    with pytest.raises(ShapeError):
        branch(torch.randn(1, 5, 4, 2), torch.randn(1, 4, 6))
    with pytest.raises(ShapeError):
        branch(torch.randn(1, 5, 4, 2), None)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), l=st.integers(1, 12), shift=st.floats(-50, 50))
def test_attention_rows_sum_to_one_and_are_shift_invariant(seed, l, shift):
    torch.manual_seed(seed)
    raw = torch.randn(3, l, dtype=torch.float64) * 5
    alpha = torch.softmax(raw, dim=1)
    assert torch.allclose(alpha.sum(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(torch.softmax(raw + shift, dim=1), alpha, atol=1e-9)


def test_upsample_examples():
    a, b = torch.tensor([1.0, -2.0]), torch.tensor([3.0, 4.0])
    out = upsample_tokens(torch.stack([a, b]).unsqueeze(0), 3)
    assert torch.allclose(out[0], torch.stack([a, (a + b) / 2, b]))
    x = torch.randn(2, 7, 3)
    assert upsample_tokens(x, 7) is x
    const = torch.full((1, 4, 2), 1.25)
    assert torch.allclose(upsample_tokens(const, 11), torch.full((1, 11, 2), 1.25))
    with pytest.raises(ShapeError):
        upsample_tokens(x, 5)


@settings(max_examples=40, deadline=None)
@given(l=st.integers(1, 20), extra=st.integers(0, 25), seed=st.integers(0, 1000))
def test_upsample_endpoints_and_oracle(l, extra, seed):
    x = torch.randn(1, l, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    l_max = l + extra
    if l == 1 and l_max == 1:
        return
    out = upsample_tokens(x, l_max)
    assert out.shape == (1, l_max, 3)
    assert torch.equal(out[:, 0], x[:, 0]) and torch.equal(out[:, -1], x[:, -1])
    np.testing.assert_allclose(out[0].numpy(), oracles.interp(x[0].tolist(), l_max), atol=1e-12)


def test_multiscale_single_scale():
    fp, fs = torch.randn(2, 5, 4), torch.randn(2, 5, 4)
    p_hat, s_hat, w = multiscale_fuse([(fp, fs)], 5)
    assert torch.equal(w, torch.ones(2, 1))
    assert torch.equal(p_hat, fp) and torch.equal(s_hat, fs)


def test_multiscale_equal_means_average():
    fs1 = torch.randn(1, 5, 4)
    fs2 = fs1.flip(1)  # same mean
    fp1, fp2 = torch.randn(1, 5, 4), torch.randn(1, 5, 4)
    p_hat, _, w = multiscale_fuse([(fp1, fs1), (fp2, fs2)], 5)
    assert torch.allclose(w, torch.full((1, 2), 0.5))
    assert torch.allclose(p_hat, (fp1 + fp2) / 2, atol=1e-6)


def test_multiscale_three_scales_matches_oracle():
    g = torch.Generator().manual_seed(5)
    sizes = [7, 4, 2]
    per_scale = [(torch.randn(2, l, 3, generator=g, dtype=torch.float64),
                  torch.randn(2, l, 3, generator=g, dtype=torch.float64)) for l in sizes]
    p_hat, s_hat, w = multiscale_fuse(per_scale, 7)
    ref = oracles.multiscale([(a.numpy(), b.numpy()) for a, b in per_scale], 7)
    for got, want in zip((p_hat, s_hat, w), ref):
        np.testing.assert_allclose(got.numpy(), want, atol=1e-6)


def test_multiscale_errors_and_pruning():
    with pytest.raises(ConfigError):
        multiscale_fuse([], 4)
    with pytest.raises(ShapeError):
        multiscale_fuse([(torch.randn(1, 4, 3), None), (torch.randn(1, 2, 5), None)], 4)
    p_hat, s_hat, w = multiscale_fuse([(torch.randn(1, 4, 3), None), (torch.randn(1, 2, 3), None)], 4)
    assert s_hat is None and torch.equal(w, torch.full((1, 2), 0.5))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 100_000), S=st.integers(1, 4))
def test_scale_weights_are_convex(seed, S):
    g = torch.Generator().manual_seed(seed)
    feats = [torch.randn(3, 6, 4, generator=g, dtype=torch.float64) * 10 for _ in range(S)]
    w = scale_weights(feats)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(dim=1), torch.ones(3, dtype=torch.float64), atol=1e-6)
