"""The full network: features -> channel encoder -> temporal encoder -> decoder -> heads."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import masking
from .attention import (
    ChannelPosTable,
    CrossAttentionBlock,
    RMSNorm,
    SelfAttentionBlock,
    linear,
    rope,
    to_additive,
    trunc_normal_,
)
from .convfeat import FeatureConfig, FeatureExtractor, default_stacks, recon_reference
from .eegdata import N_ELECTRODES, PATCH_SIZE, TASK_CATEGORIES, PatchBatch
from .masking import MaskPlan, TaskKind
from .spectral import n_bins

N_BINS = n_bins(PATCH_SIZE)
RECON_WIDTH = PATCH_SIZE + N_BINS


@dataclass(frozen=True)
class ModelConfig:
    name: str
    model_dim: int
    mlp_dim: int
    channel_blocks: int
    temporal_blocks: int
    decoder_blocks: int
    heads: int
    spectral_dim: int = 128
    conv_width: int = 16
    pooled_len: int = 4

    def __post_init__(self) -> None:
        if self.model_dim % self.heads:
            raise ValueError("heads must divide model_dim")
        if (self.model_dim // self.heads) % 2:
            raise ValueError("head dimension must be even")
        if not 0 < self.spectral_dim < self.model_dim:
            raise ValueError("spectral_dim must lie in (0, model_dim)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def temporal_dim(self) -> int:
        return self.model_dim - self.spectral_dim

    @property
    def ffn_hidden(self) -> int:
        return 2 * self.mlp_dim

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            stacks=default_stacks(self.conv_width, self.pooled_len),
            embed_dim=self.temporal_dim,
            temporal_dim=self.temporal_dim,
            spectral_dim=self.spectral_dim,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


VARIANTS: dict[str, ModelConfig] = {
    "tiny": ModelConfig("tiny", 64, 64, 1, 2, 1, 4, spectral_dim=16, conv_width=8),
    "S": ModelConfig("S", 384, 256, 1, 5, 2, 4),
    "M": ModelConfig("M", 512, 512, 1, 7, 4, 4),
    "B": ModelConfig("B", 640, 512, 2, 14, 8, 8),
    "L": ModelConfig("L", 896, 768, 2, 16, 10, 8),
    "XL": ModelConfig("XL", 1152, 768, 3, 19, 12, 12),
}


def get_variant(name: str) -> ModelConfig:
    for key, cfg in VARIANTS.items():
        if key.lower() == name.lower():
            return cfg
    raise KeyError(f"unknown model variant {name!r}; choose from {sorted(VARIANTS)}")


# --------------------------------------------------------------------------
# batches and masks as tensors
# --------------------------------------------------------------------------

@dataclass
class BatchTensors:
    patches: torch.Tensor  # [B, T, C, P]
    channel_ids: torch.Tensor  # [B, C]
    task_category: torch.Tensor  # [B]
    class_label: torch.Tensor  # [B]
    valid_channels: list[int]

    @classmethod
    def from_batch(cls, batch: PatchBatch, dtype=torch.float32) -> "BatchTensors":
        return cls(
            patches=torch.as_tensor(np.asarray(batch.patches), dtype=dtype),
            channel_ids=torch.as_tensor(batch.channel_ids, dtype=torch.long),
            task_category=torch.as_tensor(batch.task_category, dtype=torch.long),
            class_label=torch.as_tensor(batch.class_label, dtype=torch.long),
            valid_channels=[int(v) for v in batch.valid_channels],
        )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.patches.shape)

    def channel_valid(self) -> torch.Tensor:
        C = self.patches.shape[2]
        return torch.arange(C)[None, :] < torch.as_tensor(self.valid_channels)[:, None]


@dataclass
class AttentionMasks:
    channel_self: torch.Tensor  # [B, T, C, C]
    channel_cross: torch.Tensor  # [B, T, 1, C]
    temporal: torch.Tensor  # [B, T+1, T+1]
    decoder_cross: torch.Tensor  # [B, T*C, T+1]
    decoder_self: torch.Tensor  # [B, T*C, T*C]

    @classmethod
    def from_plans(cls, plans: Sequence[MaskPlan], dtype=torch.float32) -> "AttentionMasks":
        ch_self, ch_cross, temporal, dec_cross, dec_self = [], [], [], [], []
        for plan in plans:
            s, c = masking.build_channel_masks(plan)
            ch_self.append(s)
            ch_cross.append(c)
            temporal.append(masking.build_temporal_mask(plan))
            dec_cross.append(masking.decoder_cross_keys(plan))
            dec_self.append(masking.build_decoder_masks(plan)[1])
        stack = lambda xs: to_additive(torch.as_tensor(np.stack(xs)), dtype)  # noqa: E731
        return cls(stack(ch_self), stack(ch_cross), stack(temporal), stack(dec_cross), stack(dec_self))


def sample_plans(batch: BatchTensors, task_kind, seed) -> list[MaskPlan]:
    B, T, C, _ = batch.shape
    return [
        masking.sample_mask(T, C, task_kind, [int(seed), i], valid_channels=batch.valid_channels[i])
        for i in range(B)
    ]


def unmasked_plans(batch: BatchTensors) -> list[MaskPlan]:
    B, T, C, _ = batch.shape
    return [MaskPlan.unmasked(T, C, batch.valid_channels[i]) for i in range(B)]


@dataclass
class PretrainOutput:
    prediction: torch.Tensor  # [B, T, C, 385]
    reference: torch.Tensor  # [B, T, C, 385]
    plans: list[MaskPlan]
    task_logits: torch.Tensor  # [B, 10]
    encoded: torch.Tensor  # h_e [B, T+1, D]


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

class FinetuneHead(nn.Module):
    """Shared cross-attention read-out queried by a per-task CLS token."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.attn = CrossAttentionBlock(dim, heads, hidden=None)
        self.norm = RMSNorm(dim)
        self.cls_tokens = nn.ParameterDict()
        self.projectors = nn.ModuleDict()

    @property
    def tasks(self) -> dict[str, int]:
        return {name: proj.out_features for name, proj in self.projectors.items()}

    def register_task(self, name: str, n_classes: int) -> None:
        if n_classes < 2:
            raise ValueError(f"task {name!r} needs at least 2 classes")
        if name in self.projectors:
            raise ValueError(f"task {name!r} already registered")
        ref = self.attn.norm_q.gain
        self.cls_tokens[name] = nn.Parameter(trunc_normal_(torch.empty(self.dim, dtype=ref.dtype)))
        self.projectors[name] = linear(self.dim, n_classes).to(ref.dtype)

    def forward(self, h_e: torch.Tensor, task: str) -> torch.Tensor:
        if task not in self.projectors:
            raise KeyError(f"task {task!r} is not registered")
        q = self.cls_tokens[task].expand(h_e.shape[0], 1, -1)
        f = self.attn(q, h_e)[:, 0]
        return self.projectors[task](self.norm(f))


class FoundationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, H, hidden = cfg.model_dim, cfg.heads, cfg.ffn_hidden
        self.features = FeatureExtractor(cfg.feature_config())
        self.channel_pos = ChannelPosTable(N_ELECTRODES, cfg.head_dim, H)

        self.channel_query = nn.Parameter(trunc_normal_(torch.empty(D)))
        self.channel_self = nn.ModuleList(SelfAttentionBlock(D, H, hidden) for _ in range(cfg.channel_blocks))
        self.channel_cross = nn.ModuleList(CrossAttentionBlock(D, H, None) for _ in range(cfg.channel_blocks))

        self.task_tokens = nn.Parameter(trunc_normal_(torch.empty(len(TASK_CATEGORIES), D)))
        self.temporal = nn.ModuleList(SelfAttentionBlock(D, H, hidden) for _ in range(cfg.temporal_blocks))
        self.encoder_norm = RMSNorm(D)

        self.decoder_query = nn.Parameter(trunc_normal_(torch.empty(N_ELECTRODES, D)))
        self.decoder_cross = nn.ModuleList(CrossAttentionBlock(D, H, hidden) for _ in range(cfg.decoder_blocks))
        self.decoder_self = nn.ModuleList(SelfAttentionBlock(D, H, hidden) for _ in range(cfg.decoder_blocks))
        self.decoder_norm = RMSNorm(D)

        self.head_time = linear(D, PATCH_SIZE)
        self.head_freq = linear(D, N_BINS)
        self.task_probe = linear(D, len(TASK_CATEGORIES))
        self.finetune = FinetuneHead(D, H)

    @property
    def dtype(self) -> torch.dtype:
        return self.channel_query.dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- stages ---------------------------------------------------------------

    def _check_ids(self, channel_ids: torch.Tensor) -> None:
        if channel_ids.numel() and (channel_ids.min() < 0 or channel_ids.max() >= N_ELECTRODES):
            raise ValueError(f"channel id outside [0, {N_ELECTRODES})")

    def channel_encoder_forward(self, x, channel_ids, self_mask=None, cross_mask=None):
        """x [B, T, C, D] -> h_c [B, T, D]; masks additive [B, T, C, C] / [B, T, 1, C]."""
        self._check_ids(channel_ids)
        B, T, C, D = x.shape
        N = B * T
        h = x.reshape(N, C, D)
        pe = self.channel_pos(channel_ids)[:, None].expand(B, T, C, D).reshape(N, C, D)
        pos = (torch.arange(T) + 1).repeat(B)[:, None]
        q = self.channel_query.expand(N, 1, D)
        sm = None if self_mask is None else self_mask.reshape(N, C, C)
        cm = None if cross_mask is None else cross_mask.reshape(N, 1, C)
        for self_block, cross_block in zip(self.channel_self, self.channel_cross):
            h = self_block(h, sm, pos=pos, pe=pe)
            q = cross_block(q, h, cm, pos_q=pos, pos_k=pos, pe_k=pe)
        return q.reshape(B, T, D)

    def temporal_encoder_forward(self, h_c, task_category, temporal_mask=None):
        """h_c [B, T, D] -> h_e [B, T+1, D]; index 0 carries the task token."""
        task_category = torch.as_tensor(task_category, dtype=torch.long)
        if task_category.min() < 0 or task_category.max() >= len(TASK_CATEGORIES):
            raise ValueError("task category out of range")
        h = torch.cat([self.task_tokens[task_category][:, None], h_c], dim=1)
        pos = torch.arange(h.shape[1])
        for block in self.temporal:
            h = block(h, temporal_mask, pos=pos)
        return self.encoder_norm(h)

    def decoder_forward(self, h_e, channel_ids, cross_mask=None, self_mask=None):
        """h_e [B, T+1, D] -> q_L [B, T, C, D]."""
        self._check_ids(channel_ids)
        B, T1, D = h_e.shape
        T, C = T1 - 1, channel_ids.shape[1]
        H, d_h = self.cfg.heads, self.cfg.head_dim
        steps = torch.arange(T) + 1
        pe = self.channel_pos(channel_ids)[:, None].expand(B, T, C, D)
        l_d = self.decoder_query[channel_ids][:, None].expand(B, T, C, D)
        l_d = rope(l_d.reshape(B, T, C, H, d_h), steps[None, :, None, None]).reshape(B, T, C, D)
        q = (l_d + pe).reshape(B, T * C, D)
        pe = pe.reshape(B, T * C, D)
        slot_pos = steps.repeat_interleave(C)
        enc_pos = torch.arange(T1)
        for cross_block, self_block in zip(self.decoder_cross, self.decoder_self):
            q = cross_block(q, h_e, cross_mask, pos_q=slot_pos, pos_k=enc_pos, pe_q=pe)
            q = self_block(q, self_mask, pos=slot_pos, pe=pe)
        return self.decoder_norm(q).reshape(B, T, C, D)

    def pretrain_head(self, q_L):
        return self.head_time(q_L), self.head_freq(q_L)

    def finetune_head(self, h_e, task: str):
        return self.finetune(h_e, task)

    def register_task(self, name: str, n_classes: int) -> None:
        self.finetune.register_task(name, n_classes)

    # -- composed passes --------------------------------------------------------

    def forward_with_plans(self, batch: BatchTensors, plans: Sequence[MaskPlan]) -> PretrainOutput:
        patches = batch.patches.to(self.dtype)
        masks = AttentionMasks.from_plans(plans, self.dtype)
        x, x_s = self.features(patches)
        reference = recon_reference(patches, x_s)
        h_c = self.channel_encoder_forward(x, batch.channel_ids, masks.channel_self, masks.channel_cross)
        h_e = self.temporal_encoder_forward(h_c, batch.task_category, masks.temporal)
        q_L = self.decoder_forward(h_e, batch.channel_ids, masks.decoder_cross, masks.decoder_self)
        x_t_hat, x_f_hat = self.pretrain_head(q_L)
        return PretrainOutput(
            prediction=torch.cat([x_t_hat, x_f_hat], dim=-1),
            reference=reference,
            plans=list(plans),
            task_logits=self.task_probe(h_e[:, 0]),
            encoded=h_e,
        )

    def pretrain_forward(self, batch: BatchTensors, task_kind, seed) -> PretrainOutput:
        return self.forward_with_plans(batch, sample_plans(batch, TaskKind.parse(task_kind), seed))

    def encode(self, batch: BatchTensors, category: int | None = None) -> torch.Tensor:
        """Unmasked encoder pass -> h_e; ``category`` overrides the batch's task ids."""
        plans = unmasked_plans(batch)
        masks = AttentionMasks.from_plans(plans, self.dtype)
        x, _ = self.features(batch.patches.to(self.dtype))
        h_c = self.channel_encoder_forward(x, batch.channel_ids, masks.channel_self, masks.channel_cross)
        cats = batch.task_category if category is None else torch.full_like(batch.task_category, category)
        return self.temporal_encoder_forward(h_c, cats, masks.temporal)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EEGFMCKP"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sII")  # magic, version, header byte length


class CheckpointError(ValueError):
    pass


def write_tensor_file(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"path": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({**meta, "manifest": entries, "payload_bytes": offset}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def read_tensor_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        meta = json.loads(raw[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[start:]
    if len(payload) != meta.get("payload_bytes"):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {meta.get('payload_bytes')}")
    tensors = {}
    for entry in meta.pop("manifest"):
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["path"]] = arr.reshape(entry["shape"]).copy()
    return tensors, meta


def save_checkpoint(path, model: FoundationModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Parameters (and optional extra arrays, e.g. optimizer moments) as float32."""
    tensors = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.named_parameters()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    header = {
        "variant": model.cfg.name,
        "config": model.cfg.to_dict(),
        "tasks": model.finetune.tasks,
        "meta": meta or {},
    }
    write_tensor_file(path, tensors, header)


def load_checkpoint(path, dtype=torch.float32) -> tuple[FoundationModel, dict[str, np.ndarray], dict]:
    """Rebuild the model; returns (model, non-parameter arrays, meta)."""
    tensors, header = read_tensor_file(path)
    cfg = ModelConfig(**header["config"])
    model = FoundationModel(cfg)
    for name, n_classes in header.get("tasks", {}).items():
        model.register_task(name, n_classes)
    model = model.to(dtype)
    params = dict(model.named_parameters())
    missing = set(params) - {k[len("param/"):] for k in tensors if k.startswith("param/")}
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors.pop(f"param/{name}")
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            p.copy_(torch.from_numpy(arr))
    return model, tensors, header.get("meta", {})
