"""Pretraining and finetuning objectives.

Reconstruction error for one patch is the mean of two root-mean-square
errors: one over the 256 raw samples and one over the 129 log-PSD bins.
Reductions over patches are arithmetic means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .eegdata import PATCH_SIZE, TASK_CATEGORIES


@dataclass(frozen=True)
class LossWeights:
    gpt: float = 0.4
    mae_tp: float = 0.275
    mae_ch: float = 0.275
    task: float = 0.05
    alpha: float = 0.9  # classification share during finetuning

    def __post_init__(self) -> None:
        if min(self.gpt, self.mae_tp, self.mae_ch, self.task) < 0 or not 0 <= self.alpha <= 1:
            raise ValueError("loss weights must be non-negative and alpha in [0, 1]")


def patch_rmse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """sqrt(mean((pred - target)^2)) over the last axis; one value per patch."""
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.shape[-1] == 0:
        raise ValueError("cannot take the RMSE of an empty patch")
    return torch.sqrt(((pred - target) ** 2).mean(dim=-1))


def recon_error(pred: torch.Tensor, target: torch.Tensor, split: int = PATCH_SIZE) -> torch.Tensor:
    """Equal-weight mean of the time-domain and frequency-domain patch RMSEs."""
    return 0.5 * (patch_rmse(pred[..., :split], target[..., :split])
                  + patch_rmse(pred[..., split:], target[..., split:]))


def loss_gpt(pred: torch.Tensor, reference: torch.Tensor, channel_valid: torch.Tensor | None = None):
    """Slot t forecasts the reference at step t + 1; mean over B * C * (T - 1) patches."""
    T = pred.shape[1]
    if T < 2:
        raise ValueError("GPT loss needs at least 2 time steps")
    p, r = pred[:, :-1], reference[:, 1:]
    if channel_valid is None:
        return recon_error(p, r).mean()
    sel = channel_valid[:, None, :].expand(-1, T - 1, -1)
    return recon_error(p[sel], r[sel]).mean()


def loss_mae(pred: torch.Tensor, reference: torch.Tensor, positions) -> torch.Tensor:
    """Mean reconstruction error over the masked positions [B, T, C] only."""
    positions = torch.as_tensor(positions, dtype=torch.bool)
    if not positions.any():
        raise ValueError("MAE loss needs at least one masked patch")
    return recon_error(pred[positions], reference[positions]).mean()


def loss_dt(task_logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_cat = len(TASK_CATEGORIES)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cat):
        raise ValueError(f"task label outside [0, {n_cat})")
    return F.cross_entropy(task_logits, labels)


def pretrain_total(l_gpt, l_mae_tp, l_mae_ch, l_dt, weights: LossWeights = LossWeights()):
    return weights.gpt * l_gpt + weights.mae_tp * l_mae_tp + weights.mae_ch * l_mae_ch + weights.task * l_dt


def class_weights(freqs) -> np.ndarray:
    """1/sqrt(frequency), rescaled to mean 1."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.size == 0 or np.any(freqs <= 0):
        raise ValueError("class frequencies must all be positive")
    raw = 1.0 / np.sqrt(freqs)
    return raw / raw.mean()


def weighted_cross_entropy(logits: torch.Tensor, labels, weights=None) -> torch.Tensor:
    """-(1/N) * sum_i w[y_i] * log p(y_i | x_i)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError("class label out of range")
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    if weights is not None:
        nll = nll * torch.as_tensor(weights, dtype=logits.dtype)[labels]
    return nll.mean()


def loss_finetune(cls_losses: Sequence, l_rec, alpha: float = 0.9):
    """sum_k (alpha * L_cls^k + (1 - alpha) * L_rec^k); l_rec may be shared or per task."""
    if len(cls_losses) == 0:
        raise ValueError("finetuning loss needs at least one task")
    recs = l_rec if isinstance(l_rec, (list, tuple)) else [l_rec] * len(cls_losses)
    if len(recs) != len(cls_losses):
        raise ValueError("need one reconstruction loss per task")
    total = 0.0
    for l_cls, rec in zip(cls_losses, recs):
        total = total + alpha * l_cls + (1.0 - alpha) * rec
    return total
