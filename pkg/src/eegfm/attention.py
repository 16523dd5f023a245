"""Attention primitives: RMSNorm, RoPE, SiLU and masked softmax attention.

The four primitives are ``torch.autograd.Function`` subclasses with explicit
backward passes; everything around them (linear maps, reshapes) is left to
autograd.  Masks are additive: 0 where a query may read a key, ``-inf``
where it may not.  A query row whose every key is blocked gets all-zero
attention weights, so it outputs zeros before the residual.
"""

from __future__ import annotations

import math

import torch
from torch import nn

RMS_EPS = 1e-6
ROPE_BASE = 10000.0
INIT_STD = 0.02


def trunc_normal_(t: torch.Tensor, std: float = INIT_STD) -> torch.Tensor:
    return nn.init.trunc_normal_(t, mean=0.0, std=std, a=-2 * std, b=2 * std)


def linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias)
    trunc_normal_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


# --------------------------------------------------------------------------
# autograd functions
# --------------------------------------------------------------------------

class RMSNormFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, gain, eps):
        r = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
        u = x * r
        ctx.save_for_backward(u, r, gain)
        return u * gain

    @staticmethod
    def backward(ctx, dy):
        u, r, gain = ctx.saved_tensors
        dgain = (dy * u).reshape(-1, u.shape[-1]).sum(dim=0)
        du = dy * gain
        dx = r * (du - u * (du * u).mean(dim=-1, keepdim=True))
        return dx, dgain, None


class RoPEFn(torch.autograd.Function):
    """Half-split rotation: [z1*cos - z2*sin, z1*sin + z2*cos]."""

    @staticmethod
    def forward(ctx, z, cos, sin):
        half = z.shape[-1] // 2
        z1, z2 = z[..., :half], z[..., half:]
        ctx.save_for_backward(cos, sin)
        return torch.cat([z1 * cos - z2 * sin, z1 * sin + z2 * cos], dim=-1)

    @staticmethod
    def backward(ctx, dout):
        cos, sin = ctx.saved_tensors
        half = dout.shape[-1] // 2
        d1, d2 = dout[..., :half], dout[..., half:]
        # inverse rotation
        dz = torch.cat([d1 * cos + d2 * sin, d2 * cos - d1 * sin], dim=-1)
        return dz, None, None


class SiLUFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        s = torch.sigmoid(x)
        ctx.save_for_backward(x, s)
        return x * s

    @staticmethod
    def backward(ctx, dy):
        x, s = ctx.saved_tensors
        return dy * s * (1 + x * (1 - s))


class MaskedAttentionFn(torch.autograd.Function):
    """softmax(q k^T * scale + mask) v over the last two axes."""

    @staticmethod
    def forward(ctx, q, k, v, mask, scale):
        scores = torch.matmul(q, k.transpose(-1, -2)) * scale + mask
        row_max = scores.amax(dim=-1, keepdim=True)
        row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
        e = torch.exp(scores - row_max)
        denom = e.sum(dim=-1, keepdim=True)
        p = torch.where(denom > 0, e / torch.where(denom > 0, denom, torch.ones_like(denom)), e)
        out = torch.matmul(p, v)
        ctx.scale = scale
        ctx.save_for_backward(q, k, v, p)
        return out

    @staticmethod
    def backward(ctx, dout):
        q, k, v, p = ctx.saved_tensors
        scale = ctx.scale
        dv = torch.matmul(p.transpose(-1, -2), dout)
        dp = torch.matmul(dout, v.transpose(-1, -2))
        ds = p * (dp - (dp * p).sum(dim=-1, keepdim=True))
        dq = torch.matmul(ds, k) * scale
        dk = torch.matmul(ds.transpose(-1, -2), q) * scale
        # q/k/v may have been broadcast against each other
        return _unbroadcast(dq, q.shape), _unbroadcast(dk, k.shape), _unbroadcast(dv, v.shape), None, None


def _unbroadcast(grad: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    while grad.dim() > len(shape):
        grad = grad.sum(dim=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(dim=i, keepdim=True)
    return grad


# --------------------------------------------------------------------------
# functional wrappers
# --------------------------------------------------------------------------

def rmsnorm(v: torch.Tensor, gain: torch.Tensor | None = None, eps: float = RMS_EPS) -> torch.Tensor:
    if gain is None:
        gain = torch.ones(v.shape[-1], dtype=v.dtype, device=v.device)
    return RMSNormFn.apply(v, gain, eps)


def rope_inv_freq(d_h: int, base: float = ROPE_BASE, dtype=torch.float64) -> torch.Tensor:
    if d_h % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {d_h}")
    j = torch.arange(d_h // 2, dtype=torch.float64)
    return (base ** (-2.0 * j / d_h)).to(dtype)


def rope(z: torch.Tensor, m, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate z (last axis d_h) by position(s) m, broadcastable to z.shape[:-1]."""
    d_h = z.shape[-1]
    inv_freq = rope_inv_freq(d_h, base, dtype=torch.float64)
    m = torch.as_tensor(m, dtype=torch.float64, device=z.device)
    angles = m[..., None] * inv_freq
    return RoPEFn.apply(z, torch.cos(angles).to(z.dtype), torch.sin(angles).to(z.dtype))


def silu(x: torch.Tensor) -> torch.Tensor:
    return SiLUFn.apply(x)


def to_additive(enabled: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Boolean enabled-mask -> additive mask (0 / -inf)."""
    enabled = torch.as_tensor(enabled, dtype=torch.bool)
    zero = torch.zeros((), dtype=dtype)
    return torch.where(enabled, zero, torch.full((), float("-inf"), dtype=dtype))


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None, heads: int):
    """Multi-head masked attention before the output projection.

    q: [N, Lq, D], k/v: [N, Lk, D], mask: additive, broadcastable to [N, Lq, Lk].
    """
    N, Lq, D = q.shape
    Lk = k.shape[1]
    if D % heads:
        raise ValueError(f"model dim {D} not divisible by {heads} heads")
    if k.shape[-1] != D or v.shape[:2] != k.shape[:2]:
        raise ValueError("q, k, v shapes disagree")
    d_h = D // heads
    split = lambda t, L: t.reshape(t.shape[0], L, heads, d_h).transpose(1, 2)  # noqa: E731
    if mask is None:
        mask = torch.zeros((1, 1, Lq, Lk), dtype=q.dtype, device=q.device)
    else:
        if mask.shape[-2:] != (Lq, Lk):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match [{Lq}, {Lk}]")
        mask = _head_axis(mask.to(q.dtype))
    out = MaskedAttentionFn.apply(split(q, Lq), split(k, Lk), split(v, Lk), mask, 1.0 / math.sqrt(d_h))
    return out.transpose(1, 2).reshape(N, Lq, D)


def attention_weights(q, k, mask, heads: int) -> torch.Tensor:
    """Per-head attention probabilities [N, H, Lq, Lk]; used for inspection and tests."""
    N, Lq, D = q.shape
    Lk = k.shape[1]
    d_h = D // heads
    qh = q.reshape(N, Lq, heads, d_h).transpose(1, 2)
    kh = k.reshape(N, Lk, heads, d_h).transpose(1, 2)
    ones_v = torch.eye(Lk, dtype=q.dtype).expand(N, heads, Lk, Lk)
    if mask is None:
        mask = torch.zeros((1, 1, Lq, Lk), dtype=q.dtype)
    return MaskedAttentionFn.apply(qh, kh, ones_v, _head_axis(mask.to(q.dtype)), 1.0 / math.sqrt(d_h))


def _head_axis(mask: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        return mask[None, None]
    if mask.dim() == 3:
        return mask.unsqueeze(1)
    return mask


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = RMS_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return RMSNormFn.apply(v, self.gain, self.eps)


class ChannelPosTable(nn.Module):
    """Learnable per-electrode embedding of width d = D / heads, tiled over heads."""

    def __init__(self, n_electrodes: int, d: int, heads: int):
        super().__init__()
        self.table = nn.Parameter(trunc_normal_(torch.empty(n_electrodes, d)))
        self.heads = heads

    def forward(self, channel_ids: torch.Tensor) -> torch.Tensor:
        return self.table[channel_ids].tile(self.heads)


class GatedFFN(nn.Module):
    """out = h_star + W_out(SiLU(W_in n) * SiLU(W_gate n)), n = RMSNorm(h)."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = RMSNorm(dim)
        self.w_gate = linear(dim, hidden, bias=False)
        self.w_in = linear(dim, hidden, bias=False)
        self.w_out = linear(hidden, dim, bias=False)

    def forward(self, h: torch.Tensor, h_star: torch.Tensor) -> torch.Tensor:
        n = self.norm(h)
        act = silu(self.w_in(n)) * silu(self.w_gate(n))
        return h_star + self.w_out(act)


class MultiHeadAttention(nn.Module):
    """Projections + RoPE/positional offsets + masked attention + output projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        if (dim // heads) % 2:
            raise ValueError("head dimension must be even for RoPE")
        self.heads = heads
        self.w_q = linear(dim, dim, bias=False)
        self.w_k = linear(dim, dim, bias=False)
        self.w_v = linear(dim, dim, bias=False)
        self.w_o = linear(dim, dim, bias=False)

    def _rotate(self, t: torch.Tensor, pos) -> torch.Tensor:
        if pos is None:
            return t
        N, L, D = t.shape
        d_h = D // self.heads
        pos = torch.as_tensor(pos).expand(N, L)[..., None]
        return rope(t.reshape(N, L, self.heads, d_h), pos).reshape(N, L, D)

    def forward(self, xq, xkv, mask=None, pos_q=None, pos_k=None, pe_q=None, pe_k=None):
        q = self._rotate(self.w_q(xq), pos_q)
        k = self._rotate(self.w_k(xkv), pos_k)
        if pe_q is not None:
            q = q + pe_q
        if pe_k is not None:
            k = k + pe_k
        return self.w_o(attend(q, k, self.w_v(xkv), mask, self.heads))


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = GatedFFN(dim, hidden)

    def forward(self, h, mask=None, pos=None, pe=None):
        n = self.norm(h)
        h_star = h + self.attn(n, n, mask, pos_q=pos, pos_k=pos, pe_q=pe, pe_k=pe)
        return self.ffn(h, h_star)


class CrossAttentionBlock(nn.Module):
    """Query stream reads a key/value stream; optional gated FFN on the query stream."""

    def __init__(self, dim: int, heads: int, hidden: int | None):
        super().__init__()
        self.norm_q = RMSNorm(dim)
        self.norm_kv = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = GatedFFN(dim, hidden) if hidden else None

    def forward(self, q, kv, mask=None, pos_q=None, pos_k=None, pe_q=None, pe_k=None):
        q_star = q + self.attn(self.norm_q(q), self.norm_kv(kv), mask, pos_q, pos_k, pe_q, pe_k)
        if self.ffn is None:
            return q_star
        return self.ffn(q, q_star)
