"""Optimizer, schedule, pretraining / finetuning loops and the gradient-check harness.

Batch composition and mask sampling are pure functions of ``(seed, step)``,
so a run resumed from a checkpoint replays exactly the batches it would have
seen.  Bit-identical loss histories additionally need single-threaded torch.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .config import TaskSpec, TrainConfig
from .convfeat import recon_reference
from .eegdata import PatchBatch, Session, category_id, collate, patchify, windows
from .masking import PRETRAIN_CYCLE, MaskPlan, TaskKind
from .metrics import report
from .model import (
    AttentionMasks,
    BatchTensors,
    FoundationModel,
    get_variant,
    load_checkpoint,
    sample_plans,
    save_checkpoint,
    unmasked_plans,
)
from .spectral import psd_log

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


# --------------------------------------------------------------------------
# schedule and optimizer
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 5
    total_steps: int = 100
    min_lr: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to min_lr at total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= cfg.total_steps:
        return cfg.min_lr
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def schedule_for(total_steps: int, peak_lr: float, warmup_frac: float, min_lr: float = 0.0) -> ScheduleConfig:
    total = max(total_steps, 2)
    warmup = min(max(1, int(round(warmup_frac * total))), total - 1)
    return ScheduleConfig(peak_lr, warmup, total, min_lr)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay, over named parameters."""

    def __init__(self, params: dict[str, torch.Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.skipped: list[int] = []

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor | None], lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) if any gradient is non-finite."""
        for k, g in grads.items():
            if g is not None and not torch.isfinite(g).all():
                log.warning("non-finite gradient in %s at step %d; update skipped", k, self.step_count + 1)
                self.skipped.append(self.step_count + 1)
                return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.mul_(1.0 - lr * self.weight_decay)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k].detach().cpu().numpy()
            out[f"optim/v/{k}"] = self.v[k].detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        with torch.no_grad():
            for k, p in self.params.items():
                self.m[k].copy_(torch.from_numpy(arrays[f"optim/m/{k}"]).to(p.dtype))
                self.v[k].copy_(torch.from_numpy(arrays[f"optim/v/{k}"]).to(p.dtype))
        self.step_count = step_count


def optimizer_step(params, grads, state: AdamW, lr: float) -> bool:
    state.params = params
    return state.step(grads, lr)


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

def session_windows(sessions: Sequence[Session], n_steps: int) -> list[PatchBatch]:
    out = []
    for s in sessions:
        out.extend(windows(patchify(s), n_steps))
    return out


def batch_indices(n_items: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step`` from a stream of per-epoch permutations (cycles forever)."""
    if n_items < 1:
        raise ValueError("empty dataset")
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n_items)
        perm = np.random.default_rng([seed, epoch]).permutation(n_items)
        out.extend(perm[offset : offset + batch_size - len(out)].tolist())
    return np.asarray(out, dtype=np.int64)


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def split_by_session(labels: Sequence[int], val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Stratified session split; returns (train indices, val indices)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7919])
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_val = max(1, int(round(val_fraction * idx.size))) if idx.size > 1 else 0
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return sorted(train), sorted(val)


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def build_model(cfg: TrainConfig) -> FoundationModel:
    torch.manual_seed(cfg.seed)
    return FoundationModel(get_variant(cfg.variant)).to(DTYPES[cfg.dtype])


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

def pretrain_losses(model: FoundationModel, batch: BatchTensors, task_kind, plans: Sequence[MaskPlan],
                    weights: L.LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    kind = TaskKind.parse(task_kind)
    out = model.forward_with_plans(batch, plans)
    valid = batch.channel_valid()
    if kind is TaskKind.GPT:
        rec = L.loss_gpt(out.prediction, out.reference, valid)
    else:
        pos = torch.as_tensor(np.stack([p.loss_positions() for p in plans]))
        rec = L.loss_mae(out.prediction, out.reference, pos)
    l_dt = L.loss_dt(out.task_logits, batch.task_category)
    zero = rec.new_zeros(())
    parts = {TaskKind.GPT: zero, TaskKind.MAE_TP: zero, TaskKind.MAE_CH: zero}
    parts[kind] = rec
    total = L.pretrain_total(parts[TaskKind.GPT], parts[TaskKind.MAE_TP], parts[TaskKind.MAE_CH], l_dt, weights)
    comps = {
        "gpt": parts[TaskKind.GPT].item(),
        "mae_tp": parts[TaskKind.MAE_TP].item(),
        "mae_ch": parts[TaskKind.MAE_CH].item(),
        "dt": l_dt.item(),
        "total": total.item(),
    }
    return total, comps


@dataclass
class PretrainState:
    model: FoundationModel
    optimizer: AdamW
    step: int = 0  # number of completed steps
    history: list[dict] = field(default_factory=list)


def new_pretrain_state(model: FoundationModel, cfg: TrainConfig) -> PretrainState:
    params = dict(model.named_parameters())
    return PretrainState(model, AdamW(params, weight_decay=cfg.weight_decay))


def save_pretrain_state(path, state: PretrainState, cfg: TrainConfig) -> None:
    meta = {"stage": "pretrain", "step": state.step, "optimizer_step": state.optimizer.step_count,
            "train_config": cfg.to_dict()}
    save_checkpoint(path, state.model, state.optimizer.state_arrays(), meta)


def load_pretrain_state(path, cfg: TrainConfig) -> PretrainState:
    model, arrays, meta = load_checkpoint(path, DTYPES[cfg.dtype])
    state = new_pretrain_state(model, cfg)
    state.optimizer.load_state_arrays(arrays, meta["optimizer_step"])
    state.step = meta["step"]
    return state


def pretrain_loop(state: PretrainState, data: Sequence[PatchBatch], cfg: TrainConfig,
                  run_dir: str | Path | None = None, until: int | None = None,
                  on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Run pretraining from ``state.step`` up to ``until`` (default cfg.steps).

    Task kinds cycle GPT -> MAE-TP -> MAE-CH.  With a run directory, each step is
    appended to logs/steps.jsonl and checkpoints land in checkpoints/.
    """
    model, opt = state.model, state.optimizer
    sched = schedule_for(cfg.steps, cfg.peak_lr, cfg.warmup_frac, cfg.min_lr)
    weights = cfg.loss_weights()
    dtype = DTYPES[cfg.dtype]
    until = cfg.steps if until is None else until
    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "logs" / "steps.jsonl", "a")
    try:
        model.train()
        while state.step < until:
            step = state.step
            kind = PRETRAIN_CYCLE[step % len(PRETRAIN_CYCLE)]
            idx = batch_indices(len(data), cfg.batch_size, step, cfg.seed)
            batch = BatchTensors.from_batch(collate([data[i] for i in idx]), dtype)
            plans = sample_plans(batch, kind, step_seed(cfg.seed, step))
            loss, comps = pretrain_losses(model, batch, kind, plans, weights)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {k: p.grad for k, p in opt.params.items()}
            grad_norm = clip_grads(grads, cfg.clip_norm)
            lr = lr_at(step, sched)
            applied = opt.step(grads, lr)
            state.step += 1
            rec = {"step": state.step, "task": kind.value, **comps, "lr": lr, "grad_norm": grad_norm,
                   "applied": applied}
            state.history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_step:
                on_step(rec)
            if run_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_pretrain_state(run_dir / "checkpoints" / f"step_{state.step:06d}.ckpt", state, cfg)
        if run_dir is not None:
            save_pretrain_state(run_dir / "checkpoints" / "last.ckpt", state, cfg)
    finally:
        if log_fh:
            log_fh.close()
    return state.history


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing-window moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window > v.size:
        raise ValueError("window must lie in [1, len(values)]")
    c = np.cumsum(np.r_[0.0, v])
    return (c[window:] - c[:-window]) / window


# --------------------------------------------------------------------------
# finetuning
# --------------------------------------------------------------------------

@dataclass
class FinetuneTask:
    name: str
    category: int
    n_classes: int
    train: list[PatchBatch]
    val: list[PatchBatch]
    class_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"task {self.name!r} needs at least 2 classes")
        if self.class_weights is None:
            labels = np.array([int(w.class_label[0]) for w in self.train])
            freqs = np.bincount(labels, minlength=self.n_classes).astype(np.float64)
            if np.any(freqs == 0):
                raise ValueError(f"task {self.name!r}: some class has no training windows")
            self.class_weights = L.class_weights(freqs / freqs.sum())


def make_task(spec: TaskSpec, sessions: Sequence[Session], n_steps: int, val_fraction: float,
              seed: int) -> FinetuneTask:
    """Windows of the sessions whose class is in ``spec.classes``; labels remapped to 0..k-1."""
    mapping = {c: i for i, c in enumerate(spec.classes)}
    chosen = [s for s in sessions if s.class_label in mapping]
    if not chosen:
        raise ValueError(f"task {spec.name!r}: no sessions with classes {spec.classes}")
    tr_idx, va_idx = split_by_session([s.class_label for s in chosen], val_fraction, seed)

    def relabel(idx):
        out = []
        for i in idx:
            for w in windows(patchify(chosen[i]), n_steps):
                w.class_label = np.array([mapping[chosen[i].class_label]], dtype=np.int64)
                out.append(w)
        return out

    return FinetuneTask(spec.name, category_id(spec.category), len(spec.classes), relabel(tr_idx), relabel(va_idx))


def task_batch_sizes(tasks: Sequence[FinetuneTask], batch_size: int) -> list[int]:
    """Per-task mini-batch sizes proportional to training-set size (each at least 1)."""
    total = sum(len(t.train) for t in tasks)
    return [max(1, int(round(batch_size * len(t.train) / total))) for t in tasks]


def finetune_forward(model: FoundationModel, task: FinetuneTask, batch: BatchTensors, alpha: float):
    """Returns (classification loss, reconstruction loss or None, logits)."""
    h_e = model.encode(batch, category=task.category)
    logits = model.finetune_head(h_e, task.name)
    l_cls = L.weighted_cross_entropy(logits, batch.class_label, task.class_weights)
    l_rec = None
    if alpha < 1.0:
        # unmasked decoder pass; every valid patch is scored
        plans = unmasked_plans(batch)
        masks = AttentionMasks.from_plans(plans, model.dtype)
        q_L = model.decoder_forward(h_e, batch.channel_ids, masks.decoder_cross, masks.decoder_self)
        pred = torch.cat(model.pretrain_head(q_L), dim=-1)
        patches = batch.patches.to(model.dtype)
        reference = recon_reference(patches, psd_log(patches))
        T = batch.shape[1]
        pos = batch.channel_valid()[:, None, :].expand(-1, T, -1)
        l_rec = L.loss_mae(pred, reference, pos)
    return l_cls, l_rec, logits


@torch.no_grad()
def evaluate(model: FoundationModel, task: FinetuneTask, split: str = "val", batch_size: int = 32,
             dtype=torch.float32) -> dict:
    model.eval()
    items = task.val if split == "val" else task.train
    probs, labels = [], []
    for start in range(0, len(items), batch_size):
        batch = BatchTensors.from_batch(collate(items[start : start + batch_size]), dtype)
        logits = model.finetune_head(model.encode(batch, category=task.category), task.name)
        probs.append(torch.softmax(logits.double(), dim=-1).numpy())
        labels.append(batch.class_label.numpy())
    model.train()
    return report(task.name, split, np.concatenate(labels), np.concatenate(probs))


@dataclass
class FinetuneResult:
    history: list[dict]
    epoch_metrics: list[dict]
    best_epoch: int
    best_score: float
    best_state: dict


def finetune_loop(model: FoundationModel, tasks: Sequence[FinetuneTask], cfg: TrainConfig,
                  run_dir: str | Path | None = None) -> FinetuneResult:
    if not tasks:
        raise ValueError("finetuning needs at least one task")
    for t in tasks:
        if t.name not in model.finetune.tasks:
            model.register_task(t.name, t.n_classes)
    dtype = DTYPES[cfg.dtype]
    sizes = task_batch_sizes(tasks, cfg.batch_size)
    steps_per_epoch = max(math.ceil(len(t.train) / b) for t, b in zip(tasks, sizes))
    total_steps = steps_per_epoch * cfg.epochs
    sched = schedule_for(total_steps, cfg.finetune_lr, cfg.finetune_warmup_frac, cfg.min_lr)
    opt = AdamW(dict(model.named_parameters()), weight_decay=cfg.weight_decay)

    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "logs" / "steps.jsonl", "a")

    history, epoch_metrics = [], []
    best_score, best_epoch, best_state = -1.0, -1, {}
    step = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                cls_losses, rec_losses, per_task = [], [], {}
                for k, (task, b) in enumerate(zip(tasks, sizes)):
                    idx = batch_indices(len(task.train), b, step, cfg.seed * 1009 + k)
                    batch = BatchTensors.from_batch(collate([task.train[i] for i in idx]), dtype)
                    l_cls, l_rec, _ = finetune_forward(model, task, batch, cfg.alpha)
                    cls_losses.append(l_cls)
                    rec_losses.append(l_rec if l_rec is not None else l_cls.new_zeros(()))
                    per_task[task.name] = {"cls": l_cls.item(), "rec": rec_losses[-1].item()}
                loss = L.loss_finetune(cls_losses, rec_losses, cfg.alpha)
                model.zero_grad(set_to_none=True)
                loss.backward()
                grads = {k: p.grad for k, p in opt.params.items()}
                clip_grads(grads, cfg.clip_norm)
                lr = lr_at(step, sched)
                opt.step(grads, lr)
                step += 1
                rec = {"step": step, "epoch": epoch, "task": "finetune", "total": loss.item(), "lr": lr,
                       "tasks": per_task}
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
            reports = [evaluate(model, t, "val", dtype=dtype) for t in tasks]
            score = float(np.mean([r["balanced_accuracy"] for r in reports]))
            epoch_metrics.append({"epoch": epoch, "score": score, "reports": reports})
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch, "val_balanced_accuracy": score}) + "\n")
                log_fh.flush()
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
                if run_dir is not None:
                    save_checkpoint(run_dir / "checkpoints" / "best.ckpt", model,
                                    meta={"stage": "finetune", "epoch": epoch, "score": score})
    finally:
        if log_fh:
            log_fh.close()
    return FinetuneResult(history, epoch_metrics, best_epoch, best_score, best_state)


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    path: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        where = f" worst={w.path}{list(w.index)}" if w else ""
        return f"{status} n={len(self.entries)} max_rel_error={self.max_rel_error:.3e} tol={self.tol:g}{where}"


# Relative error is |a - n| / max(|a|, |n|, GRAD_FLOOR).  Central differences at
# step 1e-5 in float64 are accurate to ~1e-10 absolute, so relative comparison
# below this magnitude measures rounding, not the gradient.
GRAD_FLOOR = 1e-6


def rel_error(a: float, n: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck_loss(model: FoundationModel, batch: BatchTensors, seed: int = 0) -> torch.Tensor:
    """Scalar touching every component: all three pretraining tasks, the task probe and
    (for each registered finetune task) the classification head."""
    weights = L.LossWeights()
    total = batch.patches.new_zeros((), dtype=model.dtype)
    for i, kind in enumerate(PRETRAIN_CYCLE):
        plans = sample_plans(batch, kind, step_seed(seed, i))
        loss, _ = pretrain_losses(model, batch, kind, plans, weights)
        total = total + loss
    h_e = None
    for name, n_classes in model.finetune.tasks.items():
        if h_e is None:
            h_e = model.encode(batch)
        labels = batch.class_label.clamp(min=0) % n_classes
        total = total + L.weighted_cross_entropy(model.finetune_head(h_e, name), labels)
    return total


def _module_group(path: str) -> str:
    return path.split(".")[0]


def _candidate_rows(path: str, batch: BatchTensors) -> np.ndarray | None:
    """Embedding tables: only rows the batch reads can carry a gradient."""
    if path in ("channel_pos.table", "decoder_query"):
        return np.unique(batch.channel_ids.numpy())
    if path == "task_tokens":
        return np.unique(batch.task_category.numpy())
    return None


def grad_check(model: FoundationModel, batch: BatchTensors, n_params: int = 50, tol: float = 1e-4,
               step: float = 1e-5, seed: int = 0, include: str | None = None,
               loss_fn: Callable[[FoundationModel, BatchTensors], torch.Tensor] | None = None) -> GradCheckReport:
    """Compare autograd gradients (with the hand-written primitive backwards) against
    central differences on ``n_params`` scalar entries spread evenly over top-level modules."""
    if model.dtype != torch.float64:
        raise ValueError("grad_check needs a float64 model")
    loss_fn = loss_fn or (lambda m, b: gradcheck_loss(m, b, seed))
    params = {k: p for k, p in model.named_parameters() if include is None or include in k}
    if not params:
        raise ValueError(f"no parameters match {include!r}")
    groups: dict[str, list[str]] = {}
    for k in params:
        groups.setdefault(_module_group(k), []).append(k)

    model.zero_grad(set_to_none=True)
    loss_fn(model, batch).backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in params.items()}
    model.zero_grad(set_to_none=True)

    rng = np.random.default_rng(seed)
    group_names = sorted(groups)
    picks = []
    for i in range(n_params):
        g = group_names[i % len(group_names)] if i < len(group_names) else group_names[rng.integers(len(group_names))]
        path = groups[g][rng.integers(len(groups[g]))]
        p = params[path]
        rows = _candidate_rows(path, batch)
        if rows is not None:
            idx = (int(rng.choice(rows)),) + tuple(int(rng.integers(n)) for n in p.shape[1:])
        else:
            idx = tuple(int(rng.integers(n)) for n in p.shape)
        picks.append((path, idx))

    entries = []
    with torch.no_grad():
        for path, idx in picks:
            p = params[path]
            orig = p[idx].item()
            p[idx] = orig + step
            plus = loss_fn(model, batch).item()
            p[idx] = orig - step
            minus = loss_fn(model, batch).item()
            p[idx] = orig
            numeric = (plus - minus) / (2 * step)
            a = float(analytic[path][idx])
            entries.append(GradCheckEntry(path, idx, a, numeric, rel_error(a, numeric)))
    return GradCheckReport(entries, tol)
