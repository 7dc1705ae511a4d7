"""Dataset manifests, signal records and the trial/caption conventions.

A manifest is a JSON document listing, per split, which row of which flat
float32 matrix holds each trial's signal, along with the stimulus image
reference and its captions.  The manifest is the only source of file
locations; nothing here scans directories.
"""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

SIGNAL_FORMAT = "float32-le"
STD_FLOOR = 1e-8


class ManifestError(ValueError):
    """Raised when a manifest or its signal files fail validation."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SignalRecord:
    """One stimulus trial."""

    stimulus_id: str
    signal: np.ndarray
    image_ref: str
    captions: tuple[str, ...]
    category: str | None = None
    repeat_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "signal", _frozen(self.signal))
        object.__setattr__(self, "captions", tuple(self.captions))
        if self.signal.ndim != 1:
            raise ManifestError(f"{self.stimulus_id}: signal must be a vector")
        if not self.captions:
            raise ManifestError(f"{self.stimulus_id}: at least one caption is required")
        if self.repeat_index < 0:
            raise ManifestError(f"{self.stimulus_id}: negative repeat_index")

    def with_signal(self, signal) -> "SignalRecord":
        return SignalRecord(
            self.stimulus_id, signal, self.image_ref, self.captions, self.category, self.repeat_index
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    subject_id: str
    voxel_count: int
    splits: Mapping[str, tuple[SignalRecord, ...]]
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.voxel_count <= 0:
            raise ManifestError("voxel_count must be positive")
        splits = {str(k): tuple(v) for k, v in self.splits.items()}
        for split, records in splits.items():
            validate_records(records, self.voxel_count, split)
        object.__setattr__(self, "splits", MappingProxyType(splits))

    def split(self, name: str) -> tuple[SignalRecord, ...]:
        try:
            return self.splits[name]
        except KeyError:
            raise ManifestError(f"manifest {self.name!r} has no split {name!r}") from None


@dataclass(frozen=True)
class VoxelStats:
    """Per-voxel training-set mean and (floored) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have the same shape")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


def validate_records(records: Sequence[SignalRecord], voxel_count: int, split: str = "?") -> None:
    if not records:
        raise ManifestError(f"split {split!r} is empty")
    seen = set()
    for r in records:
        if r.signal.shape[0] != voxel_count:
            raise ManifestError(
                f"split {split!r}, stimulus {r.stimulus_id!r}: signal has {r.signal.shape[0]} voxels, "
                f"manifest declares {voxel_count}"
            )
        if not np.all(np.isfinite(r.signal)):
            raise ManifestError(f"split {split!r}, stimulus {r.stimulus_id!r}: non-finite signal")
        key = (r.stimulus_id, r.repeat_index)
        if key in seen:
            raise ManifestError(f"split {split!r}: duplicate (stimulus_id, repeat_index) {key}")
        seen.add(key)


# --------------------------------------------------------------------------
# Manifest IO
# --------------------------------------------------------------------------


def read_signal_matrix(path: str | os.PathLike, voxel_count: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % voxel_count:
        raise ManifestError(f"{path}: size {raw.size} is not a multiple of voxel_count={voxel_count}")
    return raw.reshape(-1, voxel_count)


def write_signal_matrix(path: str | os.PathLike, matrix) -> None:
    np.ascontiguousarray(matrix, dtype="<f4").tofile(path)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load and validate a manifest file, reading every referenced signal row."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    try:
        voxel_count = int(doc["voxel_count"])
        fmt = doc.get("signal_format", SIGNAL_FORMAT)
        if fmt != SIGNAL_FORMAT:
            raise ManifestError(f"unsupported signal_format {fmt!r}")
        matrices: dict[Path, np.ndarray] = {}
        splits = {}
        for split, entries in doc["splits"].items():
            if not entries:
                raise ManifestError(f"split {split!r} is empty")
            counters: dict[str, int] = defaultdict(int)
            records = []
            for e in entries:
                sig_path = (path.parent / e["signal_path"]).resolve()
                if sig_path not in matrices:
                    if not sig_path.exists():
                        raise ManifestError(f"signal file not found: {sig_path}")
                    matrices[sig_path] = read_signal_matrix(sig_path, voxel_count)
                mat = matrices[sig_path]
                row = int(e["row"])
                if not 0 <= row < mat.shape[0]:
                    raise ManifestError(f"{sig_path}: row {row} out of range ({mat.shape[0]} rows)")
                sid = str(e["stimulus_id"])
                rep = int(e["repeat_index"]) if "repeat_index" in e else counters[sid]
                counters[sid] = max(counters[sid], rep + 1)
                records.append(
                    SignalRecord(
                        stimulus_id=sid,
                        signal=mat[row],
                        image_ref=str(e["image_ref"]),
                        captions=tuple(e["captions"]),
                        category=e.get("category"),
                        repeat_index=rep,
                    )
                )
            splits[split] = records
        return DatasetManifest(
            name=str(doc["name"]),
            subject_id=str(doc["subject_id"]),
            voxel_count=voxel_count,
            splits=splits,
            source=str(path),
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} is missing a required field: {exc}") from exc


def write_manifest(
    path: str | os.PathLike,
    name: str,
    subject_id: str,
    splits: Mapping[str, Sequence[SignalRecord]],
) -> Path:
    """Write records as a manifest plus one signal matrix per split (next to the manifest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    voxel_count = None
    doc_splits = {}
    for split, records in splits.items():
        mat = np.stack([r.signal for r in records])
        voxel_count = mat.shape[1] if voxel_count is None else voxel_count
        if mat.shape[1] != voxel_count:
            raise ManifestError("all splits must share a voxel count")
        sig_name = f"{path.stem}.{split}.f32"
        write_signal_matrix(path.parent / sig_name, mat)
        doc_splits[split] = [
            {
                "stimulus_id": r.stimulus_id,
                "signal_path": sig_name,
                "row": i,
                "image_ref": r.image_ref,
                "captions": list(r.captions),
                "category": r.category,
                "repeat_index": r.repeat_index,
            }
            for i, r in enumerate(records)
        ]
    doc = {
        "name": name,
        "subject_id": subject_id,
        "voxel_count": voxel_count,
        "signal_format": SIGNAL_FORMAT,
        "splits": doc_splits,
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


# --------------------------------------------------------------------------
# Conventions
# --------------------------------------------------------------------------


def average_repeats(records: Iterable[SignalRecord]) -> list[SignalRecord]:
    """Collapse repeated presentations of a stimulus into one averaged record.

    Output is sorted by stimulus_id and each group is summed in repeat_index
    order, so the result does not depend on the input order.
    """
    groups: dict[str, list[SignalRecord]] = defaultdict(list)
    for r in records:
        groups[r.stimulus_id].append(r)
    out = []
    for sid in sorted(groups):
        group = sorted(groups[sid], key=lambda r: r.repeat_index)
        first = group[0]
        for r in group[1:]:
            if r.image_ref != first.image_ref:
                raise ManifestError(f"stimulus {sid!r}: repeats disagree on image_ref")
            if r.captions != first.captions:
                raise ManifestError(f"stimulus {sid!r}: repeats disagree on captions")
        if len(group) == 1:
            signal = first.signal
        else:
            signal = np.mean(np.stack([r.signal for r in group]), axis=0)
        out.append(
            SignalRecord(sid, signal, first.image_ref, first.captions, first.category, 0)
        )
    return out


def fit_standardizer(train_records: Sequence[SignalRecord]) -> VoxelStats:
    if len(train_records) < 2:
        raise ValueError("fit_standardizer needs at least two training records")
    mat = np.stack([r.signal for r in train_records])
    return VoxelStats(mat.mean(axis=0), np.maximum(mat.std(axis=0), STD_FLOOR))


def standardize_array(signals: np.ndarray, stats: VoxelStats) -> np.ndarray:
    return (np.asarray(signals, dtype=np.float64) - stats.mean) / stats.std


def apply_standardizer(record: SignalRecord, stats: VoxelStats) -> SignalRecord:
    if record.signal.shape != stats.mean.shape:
        raise ManifestError(
            f"{record.stimulus_id}: signal length {record.signal.shape[0]} does not match "
            f"standardizer length {stats.mean.shape[0]}"
        )
    return record.with_signal(standardize_array(record.signal, stats))


def sample_caption(record: SignalRecord, rng: np.random.Generator) -> str:
    """Draw one of the record's captions uniformly."""
    return record.captions[int(rng.integers(len(record.captions)))]


def signal_matrix(records: Sequence[SignalRecord]) -> np.ndarray:
    return np.stack([r.signal for r in records])
