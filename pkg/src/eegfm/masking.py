"""Masked-set sampling and the boolean attention masks for every module.

All masks here are boolean "enabled" arrays (True = query may read key);
``attention.to_additive`` turns them into 0 / -inf masks.

A patch is masked when its time step is in the masked step set or its
channel is in the masked channel set.  Masked content may only ever reach
the loss as a target:

* channel encoder: masked patches are never keys; padded channels are
  blocked both ways.
* temporal encoder (position 0 is the task token): GPT is causal, MAE-TP
  blocks masked steps as keys (a masked step still reads itself, it only
  holds the channel query), MAE-CH is all-enabled.
* decoder: cross-attention sees only unmasked (or, for GPT, past) encoder
  steps; in self-attention masked slots read everything and visible slots
  read only visible slots.  GPT is block-causal over time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TIME_MASK_RATIO = 0.4
CHANNEL_MASK_RATIO = 0.5


class TaskKind(str, enum.Enum):
    GPT = "gpt"
    MAE_TP = "mae-tp"
    MAE_CH = "mae-ch"

    @classmethod
    def parse(cls, value: "TaskKind | str") -> "TaskKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown task kind {value!r}; expected one of gpt, mae-tp, mae-ch")


PRETRAIN_CYCLE = (TaskKind.GPT, TaskKind.MAE_TP, TaskKind.MAE_CH)


@dataclass(frozen=True)
class MaskPlan:
    task_kind: TaskKind
    T: int
    C: int
    masked_steps: tuple[int, ...] = ()
    masked_channels: tuple[int, ...] = ()
    valid_channels: int | None = None

    def __post_init__(self) -> None:
        if self.valid_channels is None:
            object.__setattr__(self, "valid_channels", self.C)
        if self.task_kind is TaskKind.GPT and (self.masked_steps or self.masked_channels):
            raise ValueError("GPT plans mask nothing")
        if self.task_kind is TaskKind.MAE_TP and self.masked_channels:
            raise ValueError("MAE-TP plans mask time steps only")
        if self.task_kind is TaskKind.MAE_CH and self.masked_steps:
            raise ValueError("MAE-CH plans mask channels only")
        if any(not 0 <= t < self.T for t in self.masked_steps):
            raise ValueError("masked step out of range")
        if any(not 0 <= c < self.valid_channels for c in self.masked_channels):
            raise ValueError("masked channel out of range")

    @classmethod
    def unmasked(cls, T: int, C: int, valid_channels: int | None = None) -> "MaskPlan":
        """Everything visible; used by finetuning's reconstruction pass."""
        return cls(TaskKind.MAE_TP, T, C, valid_channels=valid_channels)

    def patch_masked(self) -> np.ndarray:
        """[T, C] True where the patch is hidden from the network."""
        m = np.zeros((self.T, self.C), dtype=bool)
        m[list(self.masked_steps), :] = True
        m[:, list(self.masked_channels)] = True
        return m

    def channel_valid(self) -> np.ndarray:
        return np.arange(self.C) < self.valid_channels

    def loss_positions(self) -> np.ndarray:
        """[T, C] positions scored by the MAE loss (masked and not padding)."""
        return self.patch_masked() & self.channel_valid()[None, :]


def mask_count(n: int, ratio: float) -> int:
    """Nearest integer (halves round up), clamped to [1, n - 1]."""
    return min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)


def sample_mask(T: int, C: int, task_kind, seed, valid_channels: int | None = None) -> MaskPlan:
    kind = TaskKind.parse(task_kind)
    valid = C if valid_channels is None else int(valid_channels)
    if T < 1 or C < 1 or not 1 <= valid <= C:
        raise ValueError(f"invalid sizes T={T}, C={C}, valid_channels={valid}")
    rng = np.random.default_rng(seed)
    if kind is TaskKind.GPT:
        return MaskPlan(kind, T, C, valid_channels=valid)
    if kind is TaskKind.MAE_TP:
        if T < 2:
            raise ValueError("MAE-TP needs at least 2 time steps")
        steps = rng.choice(T, size=mask_count(T, TIME_MASK_RATIO), replace=False)
        return MaskPlan(kind, T, C, masked_steps=tuple(sorted(int(t) for t in steps)), valid_channels=valid)
    if valid < 2:
        raise ValueError("MAE-CH needs at least 2 channels")
    chans = rng.choice(valid, size=mask_count(valid, CHANNEL_MASK_RATIO), replace=False)
    return MaskPlan(kind, T, C, masked_channels=tuple(sorted(int(c) for c in chans)), valid_channels=valid)


def build_channel_masks(plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Per-step channel self mask [T, C, C] and cross mask [T, 1, C]."""
    valid = plan.channel_valid()
    key_ok = ~plan.patch_masked() & valid[None, :]
    self_mask = valid[None, :, None] & key_ok[:, None, :]
    cross_mask = key_ok[:, None, :].copy()
    return self_mask, cross_mask


def build_temporal_mask(plan: MaskPlan) -> np.ndarray:
    """[(T+1), (T+1)] mask; index 0 is the task token, index t+1 is step t."""
    n = plan.T + 1
    if plan.task_kind is TaskKind.GPT:
        return np.tril(np.ones((n, n), dtype=bool))
    if plan.task_kind is TaskKind.MAE_CH:
        return np.ones((n, n), dtype=bool)
    key_ok = np.ones(n, dtype=bool)
    key_ok[[t + 1 for t in plan.masked_steps]] = False
    return np.broadcast_to(key_ok, (n, n)) | np.eye(n, dtype=bool)


def build_decoder_masks(plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Decoder cross mask over encoder steps [T*C, T] and self mask [T*C, T*C].

    Slot s = t * C + c.  The task-token key is always visible and is not part
    of the returned cross mask; see ``decoder_cross_keys``.
    """
    T, C = plan.T, plan.C
    slot_t = np.repeat(np.arange(T), C)
    slot_valid = np.tile(plan.channel_valid(), T)
    if plan.task_kind is TaskKind.GPT:
        cross = np.arange(T)[None, :] <= slot_t[:, None]
        self_mask = slot_t[None, :] <= slot_t[:, None]
    else:
        step_ok = np.ones(T, dtype=bool)
        step_ok[list(plan.masked_steps)] = False
        cross = np.broadcast_to(step_ok, (T * C, T)).copy()
        hidden = plan.patch_masked().reshape(-1)
        self_mask = hidden[:, None] | ~hidden[None, :]
    self_mask = self_mask & slot_valid[None, :] & slot_valid[:, None]
    return cross, self_mask


def decoder_cross_keys(plan: MaskPlan) -> np.ndarray:
    """Decoder cross mask with the always-visible task-token column prepended: [T*C, T+1]."""
    cross, _ = build_decoder_masks(plan)
    return np.concatenate([np.ones((cross.shape[0], 1), dtype=bool), cross], axis=1)


def render_grid(mask: np.ndarray) -> str:
    """Rows = queries, columns = keys; '#' enabled, '.' blocked."""
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


def describe(plan: MaskPlan) -> str:
    """Text dump of every mask derived from a plan."""
    lines = [
        f"task={plan.task_kind.value} T={plan.T} C={plan.C} "
        f"masked_steps={list(plan.masked_steps)} masked_channels={list(plan.masked_channels)}"
    ]
    ch_self, ch_cross = build_channel_masks(plan)
    for t in range(plan.T):
        lines += [f"[channel self t={t}]", render_grid(ch_self[t])]
        lines += [f"[channel cross t={t}]", render_grid(ch_cross[t])]
    lines += ["[temporal]", render_grid(build_temporal_mask(plan))]
    cross, self_mask = build_decoder_masks(plan)
    lines += ["[decoder cross]", render_grid(cross)]
    lines += ["[decoder self]", render_grid(self_mask)]
    return "\n".join(lines)
