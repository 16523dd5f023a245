"""Hann-windowed single-sided log power spectra.

``psd_log`` accepts numpy arrays or torch tensors with the patch on the last
axis and returns the same kind of object.  The output is log10 of the
window-power-normalized periodogram (no x10 factor, no doubling of interior
bins), floored at ``PSD_FLOOR`` before the log.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

PSD_FLOOR = 1e-10


def hann(P: int) -> np.ndarray:
    """Symmetric Hann window, w[p] = 0.5 * (1 - cos(2*pi*p / (P - 1)))."""
    if P < 2:
        raise ValueError(f"Hann window needs P >= 2, got {P}")
    p = np.arange(P, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * p / (P - 1)))


@lru_cache(maxsize=None)
def _window_table(P: int) -> tuple[np.ndarray, float]:
    w = hann(P)
    w.setflags(write=False)
    return w, float(np.sum(w * w))


def hann_energy(P: int) -> float:
    return _window_table(P)[1]


def n_bins(P: int) -> int:
    return P // 2 + 1


def psd_power(patch):
    """Normalized one-sided periodogram |FFT(w*x)|^2 / sum(w^2), bins 0..P//2."""
    P = patch.shape[-1]
    if P < 3:
        # the 2-point Hann window is all zeros
        raise ValueError(f"psd needs P >= 3, got {P}")
    w, energy = _window_table(P)
    if isinstance(patch, torch.Tensor):
        win = torch.tensor(w, dtype=patch.dtype, device=patch.device)
        spec = torch.fft.rfft(patch * win, dim=-1)
        return (spec.real**2 + spec.imag**2) / energy
    x = np.asarray(patch, dtype=np.float64)
    spec = np.fft.rfft(x * w, axis=-1)
    return (spec.real**2 + spec.imag**2) / energy


def psd_log(patch):
    power = psd_power(patch)
    if isinstance(power, torch.Tensor):
        return torch.log10(torch.clamp(power, min=PSD_FLOOR))
    return np.log10(np.maximum(power, PSD_FLOOR))


def dft_oracle(x) -> np.ndarray:
    """O(P^2) DFT straight from the definition, X[k] = sum_p x[p] exp(-2*pi*i*k*p/P)."""
    x = np.asarray(x, dtype=np.float64)
    P = x.shape[-1]
    if P < 1:
        raise ValueError("dft_oracle needs at least one sample")
    p = np.arange(P)
    out = np.zeros(x.shape, dtype=np.complex128)
    for k in range(P):
        # k*p reduced mod P keeps the angles small and exact
        angle = -2.0 * np.pi * ((k * p) % P) / P
        out[..., k] = x @ np.cos(angle) + 1j * (x @ np.sin(angle))
    return out


def psd_log_oracle(patch) -> np.ndarray:
    """psd_log computed through dft_oracle instead of the FFT."""
    x = np.asarray(patch, dtype=np.float64)
    P = x.shape[-1]
    w = hann(P)
    X = dft_oracle(x * w)[..., : n_bins(P)]
    power = np.abs(X) ** 2 / np.sum(w * w)
    return np.log10(np.maximum(power, PSD_FLOOR))
