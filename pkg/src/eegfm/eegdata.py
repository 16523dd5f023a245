"""Sessions, normalization, patching, synthetic EEG and on-disk session files.

A session directory holds two files::

    manifest.json   version, electrode labels, sample_rate, n_samples,
                    task_category, class_label, dtype
    samples.f32     little-endian float32, row-major [C0, P0], no header
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SAMPLE_RATE = 256
PATCH_SIZE = 256
ZNORM_EPS = 1e-5
SESSION_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "samples.f32"

_ROWS = ("AF", "F", "FC", "C", "CP", "P", "PO")
_ROW_TEMPORAL = {"FC": "FT", "C": "T", "CP": "TP"}


def _ten_ten_labels() -> list[str]:
    labels = ["Fp1", "Fpz", "Fp2"]
    for row in _ROWS:
        lateral = _ROW_TEMPORAL.get(row, row)
        left = [f"{lateral}9", f"{lateral}7", f"{row}5", f"{row}3", f"{row}1"]
        right = [f"{row}2", f"{row}4", f"{row}6", f"{lateral}8", f"{lateral}10"]
        labels += left + [f"{row}z"] + right
    labels += ["O1", "Oz", "O2", "I1", "Iz", "I2"]
    return labels


# Old 10-20 names that map onto 10-10 positions.
ELECTRODE_ALIASES = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}

TASK_CATEGORIES = (
    "Emotional Recognition",
    "Motor Imagery",
    "Motor Execution",
    "Seizure Detection",
    "Artifact Classification",
    "Sleep Staging",
    "Resting",
    "ERP",
    "Visual Stimulus",
    "Workload Estimation",
)


class EEGDataError(ValueError):
    """Base class for invalid sessions, batches and session files."""


class TooShortError(EEGDataError):
    pass


class UnknownElectrodeError(EEGDataError):
    pass


class SessionFileError(EEGDataError):
    """A session directory could not be parsed."""


class CorruptHeaderError(SessionFileError):
    pass


class LengthMismatchError(SessionFileError):
    pass


class UnsupportedVersionError(SessionFileError):
    pass


class ElectrodeSet:
    """The fixed 90-position electrode vocabulary (10-10 plus T1, T2, A1, A2)."""

    def __init__(self) -> None:
        self.names: tuple[str, ...] = tuple(_ten_ten_labels() + ["T1", "T2", "A1", "A2"])
        self.index: dict[str, int] = {name: i for i, name in enumerate(self.names)}
        self._lookup = {name.upper(): i for name, i in self.index.items()}
        for old, new in ELECTRODE_ALIASES.items():
            self._lookup[old.upper()] = self.index[new]

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, label: str) -> int:
        try:
            return self._lookup[label.strip().upper()]
        except KeyError:
            raise UnknownElectrodeError(f"electrode {label!r} is not in the electrode set") from None

    def ids_of(self, labels: Sequence[str]) -> list[int]:
        return [self.id_of(label) for label in labels]

    def label_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.names):
            raise UnknownElectrodeError(f"electrode id {idx} out of range [0, {len(self.names)})")
        return self.names[idx]


ELECTRODES = ElectrodeSet()
N_ELECTRODES = len(ELECTRODES)


def category_id(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        if not 0 <= int(name) < len(TASK_CATEGORIES):
            raise EEGDataError(f"task category id {name} out of range")
        return int(name)
    lowered = {c.lower(): i for i, c in enumerate(TASK_CATEGORIES)}
    key = name.strip().lower().replace("_", " ").replace("-", " ")
    if key not in lowered:
        raise EEGDataError(f"unknown task category {name!r}")
    return lowered[key]


@dataclass
class Session:
    channel_ids: list[int]
    samples: np.ndarray  # [C0, P0]
    task_category: int = category_id("Resting")
    class_label: int | None = None
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.channel_ids = [int(c) for c in self.channel_ids]
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2:
            raise EEGDataError(f"samples must be [C0, P0], got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise EEGDataError(f"sample_rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if len(self.channel_ids) < 1 or len(self.channel_ids) != self.samples.shape[0]:
            raise EEGDataError("channel_ids must be non-empty and match the samples' row count")
        if len(set(self.channel_ids)) != len(self.channel_ids):
            raise EEGDataError("channel_ids must be unique")
        for c in self.channel_ids:
            ELECTRODES.label_of(c)
        if self.samples.shape[1] < SAMPLE_RATE:
            raise TooShortError(
                f"session has {self.samples.shape[1]} samples, need at least {SAMPLE_RATE}"
            )
        self.task_category = category_id(self.task_category)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def labels(self) -> list[str]:
        return [ELECTRODES.label_of(c) for c in self.channel_ids]


@dataclass
class PatchBatch:
    patches: np.ndarray  # [B, T, C, P]
    channel_ids: np.ndarray  # [B, C] int
    task_category: np.ndarray  # [B]
    class_label: np.ndarray  # [B]; -1 when unlabeled
    valid_channels: np.ndarray  # [B]

    def __post_init__(self) -> None:
        if self.patches.ndim != 4 or self.patches.shape[-1] != PATCH_SIZE:
            raise EEGDataError(f"patches must be [B, T, C, {PATCH_SIZE}], got {self.patches.shape}")
        B, _, C, _ = self.patches.shape
        if self.channel_ids.shape != (B, C):
            raise EEGDataError("channel_ids must be [B, C]")
        if np.any(self.channel_ids < 0) or np.any(self.channel_ids >= N_ELECTRODES):
            raise EEGDataError("channel id out of range")
        if np.any(self.valid_channels < 1) or np.any(self.valid_channels > C):
            raise EEGDataError("valid_channels must lie in [1, C]")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.patches.shape

    def channel_valid_mask(self) -> np.ndarray:
        C = self.patches.shape[2]
        return np.arange(C)[None, :] < self.valid_channels[:, None]


def znormalize(signal: np.ndarray, eps: float = ZNORM_EPS) -> np.ndarray:
    """Per-row z-score over time with population std; constant rows map to zero."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise EEGDataError("cannot normalize an empty signal")
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] < 2:
        raise EEGDataError("need at least 2 samples per row to normalize")
    mu = x.mean(axis=-1, keepdims=True)
    sigma = x.std(axis=-1, keepdims=True)
    out = (x - mu) / (sigma + eps)
    return out.reshape(np.shape(signal))


def patchify(session: Session) -> PatchBatch:
    P0 = session.n_samples
    if P0 < PATCH_SIZE:
        raise TooShortError(f"need at least {PATCH_SIZE} samples, got {P0}")
    T = P0 // PATCH_SIZE
    x = znormalize(session.samples)[:, : T * PATCH_SIZE]
    C = x.shape[0]
    patches = x.reshape(C, T, PATCH_SIZE).transpose(1, 0, 2)[None]
    label = -1 if session.class_label is None else session.class_label
    return PatchBatch(
        patches=np.ascontiguousarray(patches),
        channel_ids=np.asarray([session.channel_ids], dtype=np.int64),
        task_category=np.asarray([session.task_category], dtype=np.int64),
        class_label=np.asarray([label], dtype=np.int64),
        valid_channels=np.asarray([C], dtype=np.int64),
    )


def windows(batch: PatchBatch, n_steps: int) -> list[PatchBatch]:
    """Split a single-sample batch into consecutive non-overlapping windows of n_steps patches."""
    if batch.patches.shape[0] != 1:
        raise EEGDataError("windows() expects a single-sample batch")
    T = batch.patches.shape[1]
    out = []
    for start in range(0, T - n_steps + 1, n_steps):
        out.append(
            PatchBatch(
                patches=batch.patches[:, start : start + n_steps],
                channel_ids=batch.channel_ids,
                task_category=batch.task_category,
                class_label=batch.class_label,
                valid_channels=batch.valid_channels,
            )
        )
    return out


def collate(items: Sequence[PatchBatch]) -> PatchBatch:
    """Stack batches along B; channel axes are zero-padded to the widest item."""
    if not items:
        raise EEGDataError("cannot collate an empty list")
    T = items[0].patches.shape[1]
    if any(it.patches.shape[1] != T for it in items):
        raise EEGDataError("all items must share the number of time steps")
    C = max(it.patches.shape[2] for it in items)
    B = sum(it.patches.shape[0] for it in items)
    dtype = np.result_type(*[it.patches.dtype for it in items])
    patches = np.zeros((B, T, C, PATCH_SIZE), dtype=dtype)
    ids = np.zeros((B, C), dtype=np.int64)
    row = 0
    for it in items:
        b, _, c, _ = it.patches.shape
        patches[row : row + b, :, :c] = it.patches
        ids[row : row + b, :c] = it.channel_ids
        row += b
    cat = lambda name: np.concatenate([getattr(it, name) for it in items])  # noqa: E731
    return PatchBatch(
        patches=patches,
        channel_ids=ids,
        task_category=cat("task_category"),
        class_label=cat("class_label"),
        valid_channels=cat("valid_channels"),
    )


# --------------------------------------------------------------------------
# synthetic sessions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSignature:
    freq_hz: float
    topo_phase: float  # phase of the cosine amplitude pattern over channel slots
    category: str


# Peak frequency, channel amplitude pattern, paradigm. Channel slot i of C gets
# amplitude 1 + 0.5*cos(2*pi*i/C + topo_phase).
CLASS_SIGNATURES: dict[int, ClassSignature] = {
    0: ClassSignature(10.0, 0.0, "Motor Imagery"),
    1: ClassSignature(22.0, 2.0, "Motor Imagery"),
    2: ClassSignature(35.0, 4.0, "Motor Imagery"),
    3: ClassSignature(6.0, 1.0, "Emotional Recognition"),
    4: ClassSignature(15.0, 3.0, "Emotional Recognition"),
    5: ClassSignature(45.0, 5.0, "Emotional Recognition"),
}

DEFAULT_MONTAGE = ("Fp1", "Fp2", "C3", "C4", "P3", "P4", "O1", "O2")

# Sub-components around the peak; their beating gives a slow amplitude envelope.
_BAND_OFFSETS_HZ = (-0.25, 0.0, 0.25)
_BAND_WEIGHTS = (0.5, 1.0, 0.5)


@dataclass(frozen=True)
class SynthSpec:
    class_id: int
    channels: tuple[str, ...] = DEFAULT_MONTAGE
    duration_s: int = 30
    seed: int = 0
    snr_db: float | None = 10.0  # None disables noise
    amplitude: float = 1.0
    task_category: str | None = None  # defaults to the class signature's paradigm


def synth_session(spec: SynthSpec) -> Session:
    if spec.class_id not in CLASS_SIGNATURES:
        raise EEGDataError(f"unknown synthetic class id {spec.class_id}")
    if spec.duration_s < 1:
        raise TooShortError("duration_s must be >= 1")
    sig = CLASS_SIGNATURES[spec.class_id]
    C = len(spec.channels)
    n = int(spec.duration_s * SAMPLE_RATE)
    rng = np.random.default_rng([spec.seed, spec.class_id])
    t = np.arange(n) / SAMPLE_RATE

    phases = rng.uniform(0.0, 2 * np.pi, size=len(_BAND_OFFSETS_HZ))
    source = np.zeros(n)
    for off, w, ph in zip(_BAND_OFFSETS_HZ, _BAND_WEIGHTS, phases):
        source += w * np.sin(2 * np.pi * (sig.freq_hz + off) * t + ph)
    source /= np.sqrt(0.5 * sum(w * w for w in _BAND_WEIGHTS))

    slots = np.arange(C)
    topo = 1.0 + 0.5 * np.cos(2 * np.pi * slots / max(C, 1) + sig.topo_phase)
    clean = spec.amplitude * topo[:, None] * source[None, :]

    noise = np.zeros_like(clean)
    if spec.snr_db is not None:
        p_signal = float(np.mean(clean**2))
        noise_std = math.sqrt(p_signal / 10 ** (spec.snr_db / 10.0))
        noise = noise_std * rng.standard_normal(clean.shape)
    samples = (clean + noise).astype(np.float32)
    return Session(
        channel_ids=ELECTRODES.ids_of(spec.channels),
        samples=samples,
        task_category=category_id(spec.task_category or sig.category),
        class_label=spec.class_id,
    )


# --------------------------------------------------------------------------
# session files
# --------------------------------------------------------------------------

def save_session(session: Session, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": SESSION_FORMAT_VERSION,
        "electrodes": session.labels,
        "sample_rate": session.sample_rate,
        "n_samples": session.n_samples,
        "task_category": TASK_CATEGORIES[session.task_category],
        "class_label": session.class_label,
        "dtype": "f32le",
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    data = np.ascontiguousarray(session.samples, dtype="<f4")
    (path / PAYLOAD_NAME).write_bytes(data.tobytes(order="C"))
    return path


_REQUIRED = ("version", "electrodes", "sample_rate", "n_samples", "task_category", "class_label", "dtype")


def load_session(path: str | Path) -> Session:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path / MANIFEST_NAME}: {exc}") from exc
    if not isinstance(manifest, dict) or any(k not in manifest for k in _REQUIRED):
        raise CorruptHeaderError(f"{path / MANIFEST_NAME}: missing required fields")
    if manifest["version"] != SESSION_FORMAT_VERSION:
        raise UnsupportedVersionError(f"session format version {manifest['version']!r} not supported")
    if manifest["dtype"] != "f32le":
        raise CorruptHeaderError(f"unsupported dtype {manifest['dtype']!r}")
    labels = manifest["electrodes"]
    n_samples = manifest["n_samples"]
    if not isinstance(labels, list) or not isinstance(n_samples, int) or n_samples < 0:
        raise CorruptHeaderError("malformed electrodes or n_samples field")
    ids = ELECTRODES.ids_of(labels)

    payload = path / PAYLOAD_NAME
    if not payload.exists():
        raise LengthMismatchError(f"{payload} is missing")
    raw = payload.read_bytes()
    expected = 4 * len(ids) * n_samples
    if len(raw) != expected:
        raise LengthMismatchError(f"{payload}: expected {expected} bytes, found {len(raw)}")
    samples = np.frombuffer(raw, dtype="<f4").reshape(len(ids), n_samples).astype(np.float32)
    return Session(
        channel_ids=ids,
        samples=samples,
        task_category=category_id(manifest["task_category"]),
        class_label=manifest["class_label"],
        sample_rate=manifest["sample_rate"],
    )
