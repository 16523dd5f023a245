"""Patch features: multi-scale Conv1D stacks, log-PSD branch, fusion, recon target."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .attention import linear
from .eegdata import PATCH_SIZE
from .spectral import n_bins, psd_log

FEATURE_ZNORM_EPS = 1e-5


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int
    out_width: int

    def __post_init__(self) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.out_width < 1:
            raise ValueError("out_width must be >= 1")

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


@dataclass(frozen=True)
class ConvStackSpec:
    layers: tuple[ConvLayerSpec, ...]
    pooled_len: int = 4

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width if self.layers else 1

    @property
    def d_conv(self) -> int:
        return self.out_width * self.pooled_len


def conv_output_length(length: int, layer: ConvLayerSpec) -> int:
    return (length + 2 * layer.padding - layer.kernel) // layer.stride + 1


def stack_output_length(spec: ConvStackSpec, length: int = PATCH_SIZE) -> int:
    for layer in spec.layers:
        length = conv_output_length(length, layer)
    return length


def receptive_field(spec: ConvStackSpec) -> int:
    """R_l = R_{l-1} + (K_l - 1) * prod(s_1 .. s_{l-1}), R_0 = 1."""
    r, jump = 1, 1
    for layer in spec.layers:
        r += (layer.kernel - 1) * jump
        jump *= layer.stride
    return r


def default_stacks(width: int = 16, pooled_len: int = 4) -> tuple[ConvStackSpec, ...]:
    fine = ConvStackSpec(tuple(ConvLayerSpec(7, 2, width) for _ in range(3)), pooled_len)
    coarse = ConvStackSpec(tuple(ConvLayerSpec(15, 4, width) for _ in range(2)), pooled_len)
    return (fine, coarse)


class ConvLayer(nn.Module):
    """Conv1D (zero pad (K-1)/2) -> GELU -> LayerNorm over the feature width."""

    def __init__(self, in_width: int, spec: ConvLayerSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv1d(in_width, spec.out_width, spec.kernel, spec.stride, spec.padding)
        self.norm = nn.LayerNorm(spec.out_width)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        y = F.gelu(self.conv(h))
        return self.norm(y.transpose(1, 2)).transpose(1, 2)


def conv_layer_forward(h: torch.Tensor, layer: ConvLayer) -> torch.Tensor:
    return layer(h)


class StackConv(nn.Module):
    def __init__(self, spec: ConvStackSpec, patch_size: int = PATCH_SIZE):
        super().__init__()
        if stack_output_length(spec, patch_size) < 1:
            raise ValueError(f"conv stack {spec} leaves no samples from a {patch_size}-sample patch")
        self.spec = spec
        widths = [1] + [layer.out_width for layer in spec.layers]
        self.layers = nn.ModuleList(ConvLayer(w, layer) for w, layer in zip(widths, spec.layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[N, 1, P] -> [N, D_conv]."""
        h = x
        for layer in self.layers:
            h = layer(h)
        h = F.adaptive_avg_pool1d(h, self.spec.pooled_len)
        return h.flatten(1)


class MultiScaleEmbed(nn.Module):
    """Concat of S conv stacks, projected to embed_dim, then GELU and LayerNorm."""

    def __init__(self, stacks: tuple[ConvStackSpec, ...], embed_dim: int):
        super().__init__()
        if not stacks:
            raise ValueError("need at least one conv stack")
        self.stacks = nn.ModuleList(StackConv(s) for s in stacks)
        self.w_emb = linear(sum(s.d_conv for s in stacks), embed_dim)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        lead = patches.shape[:-1]
        x = patches.reshape(-1, 1, patches.shape[-1])
        y = torch.cat([stack(x) for stack in self.stacks], dim=-1)
        out = self.norm(F.gelu(self.w_emb(y)))
        return out.reshape(*lead, -1)


def feature_znorm(x: torch.Tensor, eps: float = FEATURE_ZNORM_EPS) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    sigma = x.std(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / (sigma + eps)


class FeatureFusion(nn.Module):
    """x = Linear(znorm(x_t)) ++ Linear(znorm(x_s)); width temporal_dim + spectral_dim."""

    def __init__(self, temporal_in: int, spectral_in: int, temporal_dim: int, spectral_dim: int):
        super().__init__()
        self.temporal = linear(temporal_in, temporal_dim)
        self.spectral = linear(spectral_in, spectral_dim)
        self.temporal_dim = temporal_dim

    def forward(self, x_t: torch.Tensor, x_s: torch.Tensor) -> torch.Tensor:
        if x_t.shape[:-1] != x_s.shape[:-1]:
            raise ValueError("temporal and spectral features disagree on leading shape")
        return torch.cat([self.temporal(feature_znorm(x_t)), self.spectral(feature_znorm(x_s))], dim=-1)


@dataclass
class FeatureConfig:
    stacks: tuple[ConvStackSpec, ...] = field(default_factory=default_stacks)
    embed_dim: int = 512  # output of the multi-scale projection
    temporal_dim: int = 512
    spectral_dim: int = 128


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: FeatureConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = MultiScaleEmbed(cfg.stacks, cfg.embed_dim)
        self.fusion = FeatureFusion(cfg.embed_dim, n_bins(PATCH_SIZE), cfg.temporal_dim, cfg.spectral_dim)

    @property
    def out_dim(self) -> int:
        return self.cfg.temporal_dim + self.cfg.spectral_dim

    def forward(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """patches [B, T, C, P] -> (fused [B, T, C, D], log-PSD [B, T, C, P//2+1])."""
        x_s = psd_log(patches)
        return self.fusion(self.embed(patches), x_s), x_s


def recon_reference(x_p: torch.Tensor, x_s: torch.Tensor) -> torch.Tensor:
    """Raw normalized patch ++ log-PSD: [B, T, C, P + P//2 + 1]."""
    if x_p.shape[:-1] != x_s.shape[:-1]:
        raise ValueError("patch and spectrum disagree on leading shape")
    return torch.cat([x_p, x_s], dim=-1)
