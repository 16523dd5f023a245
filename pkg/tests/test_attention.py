import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from eegfm.attention import (
    ChannelPosTable,
    CrossAttentionBlock,
    GatedFFN,
    MultiHeadAttention,
    SelfAttentionBlock,
    attend,
    attention_weights,
    rmsnorm,
    rope,
    rope_inv_freq,
    silu,
    to_additive,
)

D64 = torch.float64


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar f w.r.t. every entry of x."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = f().item()
        flat[i] = orig - eps
        minus = f().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return g


def max_rel_err(a, n, floor=1e-6):
    return float(((a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)).max())


def check_grad(fn, *inputs, tol=1e-4):
    """Compare the hand-written backward of fn against central differences for every input."""
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    probe = torch.randn(fn(*inputs).shape, dtype=D64, generator=torch.Generator().manual_seed(9))
    loss = lambda: (fn(*inputs) * probe).sum()  # noqa: E731
    grads = torch.autograd.grad(loss(), inputs)
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            assert max_rel_err(g, numeric_grad(loss, x)) < tol


# -- RMSNorm ----------------------------------------------------------------

def test_rmsnorm_hand_example():
    out = rmsnorm(torch.tensor([3.0, 4.0], dtype=D64))
    assert torch.allclose(out, torch.tensor([0.8485, 1.1314], dtype=D64), atol=1e-4)


@given(st.floats(0.5, 100.0), st.integers(0, 10**6))
def test_rmsnorm_scale_invariant(a, seed):
    v = torch.randn(5, 8, dtype=D64, generator=torch.Generator().manual_seed(seed))
    assert torch.allclose(rmsnorm(a * v), rmsnorm(v), atol=1e-5)


def test_rmsnorm_zero_vector():
    assert torch.equal(rmsnorm(torch.zeros(6, dtype=D64)), torch.zeros(6, dtype=D64))


@pytest.mark.parametrize("D", [8, 16])
def test_rmsnorm_backward(D):
    check_grad(lambda x, g: rmsnorm(x, g), torch.randn(3, D, dtype=D64), torch.rand(D, dtype=D64) + 0.5)


# -- RoPE -------------------------------------------------------------------

def test_rope_zero_position_is_identity():
    z = torch.randn(4, 8, dtype=D64)
    assert torch.equal(rope(z, 0), z)


@given(st.integers(0, 4096), st.integers(0, 10**6))
def test_rope_preserves_norm(m, seed):
    z = torch.randn(16, dtype=D64, generator=torch.Generator().manual_seed(seed))
    assert torch.linalg.norm(rope(z, m)) == pytest.approx(torch.linalg.norm(z).item(), rel=1e-12)


@pytest.mark.parametrize("delta", [1, 5, 17])
def test_rope_relative_position(delta):
    gen = torch.Generator().manual_seed(delta)
    for _ in range(50):
        q, k = torch.randn(2, 16, dtype=D64, generator=gen)
        m, n = torch.randint(0, 2048 - delta, (2,), generator=gen).tolist()
        a = torch.dot(rope(q, m), rope(k, n))
        b = torch.dot(rope(q, m + delta), rope(k, n + delta))
        assert abs(a - b) <= 1e-6 * max(1.0, abs(a.item()))


def test_rope_half_split_layout():
    # the first half pairs with the second half: (z_j, z_{j+d/2}) rotate together
    d = 4
    z = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=D64)
    theta0 = rope_inv_freq(d)[0].item()
    out = rope(z, 3)
    assert out[0].item() == pytest.approx(math.cos(3 * theta0))
    assert out[2].item() == pytest.approx(math.sin(3 * theta0))
    assert out[1].item() == 0.0 and out[3].item() == 0.0


def test_rope_rejects_odd_width():
    with pytest.raises(ValueError):
        rope(torch.zeros(5), 1)


@pytest.mark.parametrize("D", [8, 16])
def test_rope_backward(D):
    pos = torch.arange(3, dtype=D64)[:, None]
    check_grad(lambda z: rope(z, pos), torch.randn(3, D, dtype=D64))


# -- SiLU -------------------------------------------------------------------

def test_silu_values_and_backward():
    x = torch.linspace(-4, 4, 9, dtype=D64)
    assert torch.allclose(silu(x), x * torch.sigmoid(x))
    assert silu(torch.zeros(1, dtype=D64)).item() == 0.0
    check_grad(silu, torch.randn(16, dtype=D64))


# -- masked attention ---------------------------------------------------------

def test_single_key_returns_value_projection():
    mha = MultiHeadAttention(8, 2).double()
    kv = torch.randn(1, 1, 8, dtype=D64)
    for _ in range(3):
        out = mha(torch.randn(1, 4, 8, dtype=D64), kv)
        expected = mha.w_o(mha.w_v(kv)).expand(1, 4, 8)
        assert torch.allclose(out, expected, atol=1e-12)


def test_identical_keys_give_mean_of_values():
    q = torch.randn(1, 3, 8, dtype=D64)
    k = torch.randn(1, 1, 8, dtype=D64).expand(1, 5, 8).contiguous()
    v = torch.randn(1, 5, 8, dtype=D64)
    out = attend(q, k, v, None, heads=2)
    assert torch.allclose(out, v.mean(dim=1, keepdim=True).expand(1, 3, 8), atol=1e-12)


def test_causal_mask_blocks_future_rows_bitwise():
    gen = torch.Generator().manual_seed(0)
    mask = to_additive(torch.tril(torch.ones(4, 4, dtype=torch.bool)), D64)
    q, k, v = torch.randn(3, 1, 4, 8, dtype=D64, generator=gen)
    base = attend(q, k, v, mask, heads=2)
    for j in range(4):
        k2, v2 = k.clone(), v.clone()
        k2[0, j] += torch.randn(8, dtype=D64, generator=gen)
        v2[0, j] += torch.randn(8, dtype=D64, generator=gen)
        out = attend(q, k2, v2, mask, heads=2)
        assert torch.equal(out[0, :j], base[0, :j])
        assert not torch.equal(out[0, j:], base[0, j:])


def test_weights_sum_to_one_and_blocked_are_zero():
    gen = torch.Generator().manual_seed(1)
    enabled = torch.rand(5, 6, generator=gen) > 0.4
    enabled[:, 0] = True
    w = attention_weights(torch.randn(1, 5, 8, dtype=D64), torch.randn(1, 6, 8, dtype=D64),
                          to_additive(enabled, D64), heads=2)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))
    assert torch.all(w[..., ~enabled] == 0)


def test_fully_blocked_row_outputs_zero():
    enabled = torch.ones(3, 4, dtype=torch.bool)
    enabled[1] = False
    out = attend(torch.randn(1, 3, 8, dtype=D64), torch.randn(1, 4, 8, dtype=D64),
                 torch.randn(1, 4, 8, dtype=D64), to_additive(enabled, D64), heads=2)
    assert torch.equal(out[0, 1], torch.zeros(8, dtype=D64))
    assert torch.all(torch.isfinite(out))


@given(st.integers(0, 10**6))
def test_permutation_equivariance(seed):
    gen = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 3, 8, dtype=D64, generator=gen)
    k, v = torch.randn(2, 1, 5, 8, dtype=D64, generator=gen)
    enabled = torch.rand(3, 5, generator=gen) > 0.3
    perm = torch.randperm(5, generator=gen)
    a = attend(q, k, v, to_additive(enabled, D64), 2)
    b = attend(q, k[:, perm], v[:, perm], to_additive(enabled[:, perm], D64), 2)
    assert torch.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("D", [8, 16])
def test_attention_backward(D):
    gen = torch.Generator().manual_seed(D)
    enabled = torch.rand(4, 5, generator=gen) > 0.3
    enabled[2] = False  # fully blocked row
    enabled[0, 0] = True
    mask = to_additive(enabled, D64)
    q = torch.randn(2, 4, D, dtype=D64, generator=gen)
    k, v = torch.randn(2, 2, 5, D, dtype=D64, generator=gen)
    check_grad(lambda q, k, v: attend(q, k, v, mask, 2), q, k, v)


def test_attention_mask_shape_checked():
    with pytest.raises(ValueError):
        attend(torch.zeros(1, 2, 8), torch.zeros(1, 3, 8), torch.zeros(1, 3, 8), torch.zeros(2, 2), 2)


# -- gated FFN ----------------------------------------------------------------

def test_ffn_zero_out_projection_is_residual():
    ffn = GatedFFN(8, 16).double()
    with torch.no_grad():
        ffn.w_out.weight.zero_()
    h, h_star = torch.randn(2, 8, dtype=D64), torch.randn(2, 8, dtype=D64)
    assert torch.equal(ffn(h, h_star), h_star)


def test_ffn_zero_input_is_residual():
    ffn = GatedFFN(8, 16).double()
    h_star = torch.randn(2, 8, dtype=D64)
    assert torch.equal(ffn(torch.zeros(2, 8, dtype=D64), h_star), h_star)


def test_ffn_gradient_wrt_w_in():
    ffn = GatedFFN(8, 16).double()
    with torch.no_grad():
        # O(1) weights keep the gradient well above finite-difference round-off
        for p in ffn.parameters():
            p.normal_(0.0, 0.3)
    h, h_star = torch.randn(3, 8, dtype=D64), torch.randn(3, 8, dtype=D64)
    probe = torch.randn(3, 8, dtype=D64)
    loss = lambda: (ffn(h, h_star) * probe).sum()  # noqa: E731
    (analytic,) = torch.autograd.grad(loss(), [ffn.w_in.weight])
    with torch.no_grad():
        numeric = numeric_grad(loss, ffn.w_in.weight.data)
    assert max_rel_err(analytic, numeric) < 1e-4


# -- blocks -------------------------------------------------------------------

def test_channel_pos_table_tiles_over_heads():
    table = ChannelPosTable(90, 4, 3).double()
    out = table(torch.tensor([[5, 7]]))
    assert out.shape == (1, 2, 12)
    assert torch.equal(out[0, 0, :4], out[0, 0, 4:8])
    assert torch.equal(out[0, 0, :4], table.table[5])


def test_blocks_preserve_shape_and_cross_without_ffn():
    self_block = SelfAttentionBlock(8, 2, 16).double()
    cross = CrossAttentionBlock(8, 2, None).double()
    h = torch.randn(2, 5, 8, dtype=D64)
    assert self_block(h, pos=torch.arange(5)).shape == h.shape
    assert cross(torch.randn(2, 1, 8, dtype=D64), h).shape == (2, 1, 8)
    assert cross.ffn is None


def test_cross_block_blocked_query_keeps_residual():
    cross = CrossAttentionBlock(8, 2, None).double()
    q = torch.randn(1, 1, 8, dtype=D64)
    mask = to_additive(torch.zeros(1, 1, 3, dtype=torch.bool), D64)
    assert torch.equal(cross(q, torch.randn(1, 3, 8, dtype=D64), mask), q)


def test_to_additive():
    m = to_additive(torch.tensor([True, False]), D64)
    assert m[0].item() == 0.0 and m[1].item() == -np.inf
