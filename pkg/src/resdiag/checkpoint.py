"""Self-describing binary checkpoints for trained models.

Layout, all integers little-endian:

    bytes 0..3    magic ``ORCD``
    u32           format version (currently 1)
    u32 + bytes   UTF-8 JSON blob: config, split recipe, best-epoch info
    u32           tensor count
    per tensor    u32 name length, UTF-8 name, u32 rows, u32 cols,
                  rows*cols float64 values, row-major
    bytes -32..   SHA-256 of everything before it

A checkpoint alone cannot rebuild a model; loading takes the original
dataset, replays the recorded split recipe on it, reassembles the
component stack and overwrites every parameter with the stored values,
so the loaded model re-evaluates to identical metrics bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import Dataset, inject_noise, split_dataset
from .errors import DataError
from .training import TrainConfig, TrainedModel, _build_components

MAGIC = b"ORCD"
FORMAT_VERSION = 1
_CHECKSUM_BYTES = 32

#: Snapshot tensor kept out of the parameter table; stored under this name.
_SNAPSHOT_NAME = "pooled_snapshot"


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    rows, cols = value.shape
    header = struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols)
    return header + np.ascontiguousarray(value, dtype="<f8").tobytes()


def save_trained(model: TrainedModel, path: str | Path) -> None:
    """Serialize parameters and the training recipe; write atomically."""
    split = model.split
    meta = {
        "config": model.config.to_dict(),
        "split": {
            "ratios": list(split.ratios),
            "seed": split.seed,
            "noise_ratio": split.noise_ratio,
        },
        "dataset_shape": [
            model.dataset.n_students,
            model.dataset.n_exercises,
            model.dataset.n_concepts,
        ],
        "best_epoch": model.best_epoch,
        "best_valid_auc": model.best_valid_auc,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    tensors = {name: t.value for name, t in model.parameter_tensors().items()}
    if model.pooled_snapshot is not None:
        tensors[_SNAPSHOT_NAME] = model.pooled_snapshot

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        parts.append(_pack_tensor(name, tensors[name]))
    body = b"".join(parts)
    payload = body + hashlib.sha256(body).digest()

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Cursor over the checkpoint bytes with bounds-checked reads."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Verify and parse a checkpoint into (metadata, named tensors)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + _CHECKSUM_BYTES:
        raise DataError(f"{path}: too short to be a checkpoint")
    body, digest = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")

    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed metadata: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rows, cols = reader.u32(), reader.u32()
        flat = np.frombuffer(reader.take(rows * cols * 8), dtype="<f8")
        tensors[name] = flat.reshape(rows, cols).astype(np.float64)
    if reader.pos != len(body):
        raise DataError(f"{path}: trailing bytes after tensor table")
    return meta, tensors


def load_trained(path: str | Path, dataset: Dataset) -> TrainedModel:
    """Rebuild a trained model from a checkpoint and its source dataset."""
    meta, tensors = read_checkpoint(path)
    for key in ("config", "split", "dataset_shape"):
        if key not in meta:
            raise DataError(f"{path}: metadata is missing {key!r}")

    shape = tuple(meta["dataset_shape"])
    actual = (dataset.n_students, dataset.n_exercises, dataset.n_concepts)
    if shape != actual:
        raise DataError(
            f"{path}: checkpoint was trained on shape {shape}, dataset has {actual}"
        )

    config = TrainConfig.from_dict(meta["config"])
    recipe = meta["split"]
    split = split_dataset(dataset, tuple(recipe["ratios"]), seed=int(recipe["seed"]))
    if recipe["noise_ratio"] > 0:
        split = inject_noise(split, float(recipe["noise_ratio"]), int(recipe["seed"]))

    model = _build_components(dataset, split, config)
    snapshot = tensors.pop(_SNAPSHOT_NAME, None)
    params = model.parameter_tensors()
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match (missing {missing}, extra {extra})"
        )
    for name, tensor in params.items():
        stored = tensors[name]
        if stored.shape != tensor.value.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {stored.shape}, "
                f"expected {tensor.value.shape}"
            )
        tensor.value[...] = stored

    model.best_epoch = int(meta.get("best_epoch", -1))
    best = meta.get("best_valid_auc")
    model.best_valid_auc = None if best is None else float(best)
    model.pooled_snapshot = snapshot
    return model
