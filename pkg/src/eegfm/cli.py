"""Command-line driver.

Every command that produces outputs writes them under a run directory::

    <run>/config-manifest.json   resolved config, seed, code version
    <run>/checkpoints/           *.ckpt
    <run>/logs/steps.jsonl       one JSON record per optimizer step
    <run>/metrics/*.json         metric reports

Exit codes: 0 success, 1 invalid input (bad flags, config, data), 2 runtime
failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import train as T
from .config import ConfigError, TrainConfig, build_config, load_config
from .eegdata import (
    CLASS_SIGNATURES,
    DEFAULT_MONTAGE,
    ELECTRODES,
    PATCH_SIZE,
    EEGDataError,
    PatchBatch,
    SynthSpec,
    load_session,
    save_session,
    synth_session,
)
from .masking import TaskKind, describe, sample_mask
from .metrics import write_report
from .model import BatchTensors, CheckpointError, load_checkpoint

log = logging.getLogger("eegfm")

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2
DATASET_MANIFEST = "dataset.json"


class UsageError(Exception):
    """Raised instead of argparse's SystemExit(2) so bad usage maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def code_version() -> dict:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return {"version": __version__, "source_sha256": h.hexdigest()}


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir: Path, command: str, cfg: TrainConfig, extra: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(), "code": code_version(),
                **(extra or {})}
    (run_dir / "config-manifest.json").write_text(json.dumps(manifest, indent=2))


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve_config(args) -> TrainConfig:
    if args.config is None:
        raise UsageError(f"{args.command}: --config is required")
    cfg = load_config(args.config, _overrides(args.set))
    if getattr(args, "run_dir", None):
        cfg.run_dir = args.run_dir
    if not cfg.run_dir:
        raise ConfigError("no run directory: set run_dir in the config or pass --run-dir")
    return cfg


def load_dataset(data_dir: str | Path) -> list:
    data_dir = Path(data_dir)
    manifest_path = data_dir / DATASET_MANIFEST
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise EEGDataError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    return [load_session(data_dir / entry["path"]) for entry in manifest["sessions"]]


def _tasks(cfg: TrainConfig, sessions) -> list[T.FinetuneTask]:
    if not cfg.tasks:
        raise ConfigError("finetuning needs at least one task.<name>.classes entry")
    return [T.make_task(spec, sessions, cfg.window_steps, cfg.val_fraction, cfg.seed) for spec in cfg.tasks.values()]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if not 1 <= args.classes <= len(CLASS_SIGNATURES) - args.class_offset:
        raise ConfigError(f"--classes must lie in [1, {len(CLASS_SIGNATURES) - args.class_offset}]")
    if args.sessions < 1:
        raise ConfigError("--sessions must be positive")
    if not 1 <= args.channels <= len(DEFAULT_MONTAGE):
        raise ConfigError(f"--channels must lie in [1, {len(DEFAULT_MONTAGE)}]")
    out = Path(args.out)
    entries = []
    for i in range(args.sessions):
        class_id = args.class_offset + i % args.classes
        spec = SynthSpec(class_id, channels=DEFAULT_MONTAGE[: args.channels], duration_s=args.duration,
                         seed=args.seed * 100_003 + i, snr_db=args.snr_db)
        rel = f"sessions/s{i:04d}"
        session = synth_session(spec)
        save_session(session, out / rel)
        entries.append({"path": rel, "class_label": class_id, "task_category": session.task_category})
    manifest = {
        "generator": "synthetic", "seed": args.seed, "classes": args.classes, "class_offset": args.class_offset,
        "duration_s": args.duration, "channels": list(DEFAULT_MONTAGE[: args.channels]), "snr_db": args.snr_db,
        "code": code_version(), "sessions": entries,
    }
    (out / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(entries)} sessions to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    T.set_determinism(cfg.threads)
    run_dir = Path(cfg.run_dir)
    data = T.session_windows(load_dataset(cfg.data_dir), cfg.window_steps)
    if not data:
        raise EEGDataError(f"sessions in {cfg.data_dir} are shorter than {cfg.window_steps} patches")
    if args.resume:
        state = T.load_pretrain_state(args.resume, cfg)
    else:
        state = T.new_pretrain_state(T.build_model(cfg), cfg)
    write_manifest(run_dir, "pretrain", cfg, {"resume": args.resume or None, "n_windows": len(data)})
    history = T.pretrain_loop(state, data, cfg, run_dir=run_dir)
    if history:
        print(f"step {state.step}: total={history[-1]['total']:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    T.set_determinism(cfg.threads)
    run_dir = Path(cfg.run_dir)
    sessions = load_dataset(cfg.data_dir)
    tasks = _tasks(cfg, sessions)
    if cfg.init_checkpoint:
        model, _, _ = load_checkpoint(cfg.init_checkpoint, T.DTYPES[cfg.dtype])
    else:
        model = T.build_model(cfg)
    write_manifest(run_dir, "finetune", cfg,
                   {"init_checkpoint_sha256": file_sha256(cfg.init_checkpoint) if cfg.init_checkpoint else None})
    result = T.finetune_loop(model, tasks, cfg, run_dir=run_dir)
    best = result.epoch_metrics[result.best_epoch]
    for rep in best["reports"]:
        write_report(run_dir / "metrics" / f"{rep['task']}.json", {**rep, "epoch": result.best_epoch})
        print(f"{rep['task']}: balanced_accuracy={rep['balanced_accuracy']:.4f} (epoch {result.best_epoch})")
    write_report(run_dir / "metrics" / "history.json", {"epochs": result.epoch_metrics})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    T.set_determinism(cfg.threads)
    digest = file_sha256(args.checkpoint)
    model, _, _ = load_checkpoint(args.checkpoint, T.DTYPES[cfg.dtype])
    sessions = load_dataset(cfg.data_dir)
    tasks = _tasks(cfg, sessions)
    missing = [t.name for t in tasks if t.name not in model.finetune.tasks]
    if missing:
        raise ConfigError(f"checkpoint has no head for task(s) {missing}")
    run_dir = Path(cfg.run_dir)
    write_manifest(run_dir, "eval", cfg, {"checkpoint": str(args.checkpoint), "checkpoint_sha256": digest})
    for task in tasks:
        rep = T.evaluate(model, task, args.split, dtype=T.DTYPES[cfg.dtype])
        write_report(run_dir / "metrics" / f"eval-{task.name}-{args.split}.json", rep)
        print(f"{task.name}/{args.split}: balanced_accuracy={rep['balanced_accuracy']:.4f} kappa={rep['kappa']:.4f}")
    if file_sha256(args.checkpoint) != digest:
        log.error("checkpoint %s changed during evaluation", args.checkpoint)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_inspect_masks(args) -> int:
    plan = sample_mask(args.T, args.C, TaskKind.parse(args.task), args.seed, valid_channels=args.valid_channels)
    print(describe(plan))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = build_config({"variant": args.variant, "seed": str(args.seed), "dtype": "float64"})
    T.set_determinism(1)
    model = T.build_model(cfg)
    model.register_task("probe", 3)
    rng = np.random.default_rng(args.seed)
    B, steps, C = 2, 3, 4
    batch = PatchBatch(
        patches=rng.standard_normal((B, steps, C, PATCH_SIZE)),
        channel_ids=np.stack([rng.choice(len(ELECTRODES), C, replace=False) for _ in range(B)]),
        task_category=rng.integers(0, 10, B),
        class_label=rng.integers(0, 3, B),
        valid_channels=np.array([C, C - 1]),
    )
    report = T.grad_check(model, BatchTensors.from_batch(batch, torch.float64), n_params=args.n_params,
                          tol=args.tol, seed=args.seed, include=args.include)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAILURE


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eegfm", description="EEG foundation model: data, pretraining, finetuning, checks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic session corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--class-offset", type=int, default=0)
    p.add_argument("--sessions", type=int, default=60)
    p.add_argument("--duration", type=int, default=30, help="seconds per session")
    p.add_argument("--channels", type=int, default=len(DEFAULT_MONTAGE))
    p.add_argument("--snr-db", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)

    def with_config(p):
        p.add_argument("--config")
        p.add_argument("--run-dir")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    with_config(p)
    p.add_argument("--resume", help="continue from a pretraining checkpoint")

    p = sub.add_parser("finetune", help="supervised finetuning of one or more tasks")
    with_config(p)

    p = sub.add_parser("eval", help="evaluate a finetuned checkpoint")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("val", "train"), default="val")

    p = sub.add_parser("inspect-masks", help="print the attention masks of one sampled plan")
    p.add_argument("--task", required=True, choices=[k.value for k in TaskKind])
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--valid-channels", type=int)

    p = sub.add_parser("grad-check", help="finite-difference check of every module's gradients")
    p.add_argument("--variant", default="tiny")
    p.add_argument("--n-params", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include", help="only parameters whose path contains this string")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect-masks": cmd_inspect_masks,
    "grad-check": cmd_grad_check,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, EEGDataError, CheckpointError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("command failed")
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
