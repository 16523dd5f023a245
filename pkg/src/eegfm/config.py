"""Flat ``key = value`` config files and the run configuration they populate.

Lines starting with ``#`` are comments; inline ``#`` after a value is also
stripped.  Finetuning tasks use dotted keys::

    task.freq3.classes = 0, 1, 2
    task.freq3.category = Motor Imagery
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str
    classes: tuple[int, ...]
    category: str = "Resting"


@dataclass
class TrainConfig:
    variant: str = "tiny"
    seed: int = 0
    threads: int = 1
    dtype: str = "float32"
    data_dir: str = ""
    run_dir: str = ""
    # pretraining
    window_steps: int = 5
    batch_size: int = 16
    steps: int = 300
    peak_lr: float = 1e-4
    warmup_frac: float = 0.05
    min_lr: float = 0.0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    checkpoint_every: int = 100
    lambda_gpt: float = 0.4
    lambda_mae_tp: float = 0.275
    lambda_mae_ch: float = 0.275
    lambda_task: float = 0.05
    # finetuning
    init_checkpoint: str = ""
    epochs: int = 10
    finetune_lr: float = 5e-5
    finetune_warmup_frac: float = 0.05
    alpha: float = 0.9
    val_fraction: float = 0.2
    tasks: dict[str, TaskSpec] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["tasks"] = {k: {"classes": list(v.classes), "category": v.category} for k, v in self.tasks.items()}
        return out

    def loss_weights(self):
        from .losses import LossWeights

        return LossWeights(self.lambda_gpt, self.lambda_mae_tp, self.lambda_mae_ch, self.lambda_task, self.alpha)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _convert(key: str, value: str):
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value


def build_config(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    cfg.tasks = dict(cfg.tasks)
    task_fields: dict[str, dict[str, str]] = {}
    for key, value in values.items():
        if key.startswith("task."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("classes", "category"):
                raise ConfigError(f"unknown task key {key!r}; use task.<name>.classes / .category")
            task_fields.setdefault(parts[1], {})[parts[2]] = value
            continue
        if key not in _FIELDS or key == "tasks":
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _convert(key, value))
    for name, spec in task_fields.items():
        old = cfg.tasks.get(name)
        classes = spec.get("classes")
        if classes is None and old is None:
            raise ConfigError(f"task {name!r} needs a classes entry")
        cls_tuple = (
            tuple(int(c) for c in classes.replace(" ", "").split(",") if c) if classes else old.classes
        )
        category = spec.get("category", old.category if old else "Resting")
        cfg.tasks[name] = TaskSpec(name, cls_tuple, category)
    return cfg


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_text(text)
    values.update(overrides or {})
    return build_config(values)
