"""Shared training machinery: configs, checkpoints, deterministic batching.

Every source of randomness in an epoch derives from (seed, epoch), so a run
resumed from a checkpoint at an epoch boundary replays the remaining epochs
bit-for-bit.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data_sim import DatasetManifest, ManifestRow
from .errors import CheckpointMismatch, EmptyCorpus, TrainingDiverged
from .signal_core import Waveform, crop_or_pad, read_wav

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Optimizer and loop settings; defaults follow the full-scale recipe."""

    batch_size: int = 32
    learning_rate: float = 4e-4
    epochs: int = 400
    crop_seconds: float = 4.0
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    workers: int = 1
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class Checkpoint:
    path: Path
    payload: dict

    @property
    def pipeline(self) -> str:
        return self.payload["pipeline"]

    @property
    def epoch(self) -> int:
        return self.payload["epoch"]


def save_checkpoint(
    path: str | Path,
    pipeline: str,
    model_config: dict,
    model_state: dict,
    optimizer_state: dict | None,
    epoch: int,
    train_config: dict | None = None,
    extra: dict | None = None,
) -> Checkpoint:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "pipeline": pipeline,
        "config": model_config,
        "train_config": train_config or {},
        "model_state": model_state,
        "optimizer_state": optimizer_state,
        "epoch": epoch,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return Checkpoint(path=path, payload=payload)


def load_checkpoint(path: str | Path, expected_pipeline: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatch(f"{path} is not a format-v{CHECKPOINT_FORMAT_VERSION} checkpoint")
    if expected_pipeline is not None and payload.get("pipeline") != expected_pipeline:
        raise CheckpointMismatch(
            f"checkpoint pipeline {payload.get('pipeline')!r} does not match requested {expected_pipeline!r}"
        )
    return Checkpoint(path=path, payload=payload)


_EPOCH_OFFSET = 1_000_000  # sentinel epochs (-1 for init/validation) stay non-negative


def epoch_seed(seed: int, epoch: int) -> int:
    return int(
        np.random.default_rng([seed, epoch + _EPOCH_OFFSET, 0x65706F]).integers(0, 2**31 - 1)
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    order = np.arange(n)
    np.random.default_rng([seed, epoch + _EPOCH_OFFSET, 0x6F7264]).shuffle(order)
    return order


def item_crop_seed(seed: int, epoch: int, utterance_id: str) -> int:
    import hashlib

    digest = hashlib.sha256(f"{seed}:{epoch}:{utterance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def load_cropped_pair(
    manifest: DatasetManifest, row: ManifestRow, crop_seconds: float, crop_seed: int
) -> tuple[Waveform, Waveform]:
    """Aligned (clean, degraded) fixed-length crops; one seed keeps them in sync."""
    clean = read_wav(manifest.resolve(row.clean_path))
    degraded = read_wav(manifest.resolve(row.degraded_path))
    return (
        crop_or_pad(clean, crop_seconds, crop_seed),
        crop_or_pad(degraded, crop_seconds, crop_seed),
    )


def load_pairs(
    manifest: DatasetManifest,
    rows: list[ManifestRow],
    crop_seconds: float,
    seed: int,
    epoch: int,
    workers: int = 1,
) -> list[tuple[Waveform, Waveform]]:
    def one(row):
        return load_cropped_pair(manifest, row, crop_seconds, item_crop_seed(seed, epoch, row.id))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, rows))
    return [one(row) for row in rows]


def split_rows_or_raise(manifest: DatasetManifest, split: str) -> list[ManifestRow]:
    rows = sorted(manifest.split_rows(split), key=lambda r: r.id)
    if not rows:
        raise EmptyCorpus(f"manifest has no rows in split {split!r}")
    return rows


def iter_batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


class LossLogger:
    """Per-epoch CSV log; columns are fixed at construction per loss config."""

    def __init__(self, path: str | Path, columns: list[str]):
        self.path = Path(path)
        self.columns = ["epoch", "split"] + columns
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.columns)

    def log(self, epoch: int, split: str, **terms):
        row = [epoch, split] + [terms.get(c, "") for c in self.columns[2:]]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def ensure_finite(loss_value: float, out_dir: str | None, context: dict):
    if np.isfinite(loss_value):
        return
    diagnostics_path = None
    if out_dir is not None:
        diagnostics_path = str(Path(out_dir) / "divergence.json")
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(diagnostics_path, "w") as f:
            json.dump({"loss": str(loss_value), **context}, f, indent=2)
    raise TrainingDiverged(
        f"non-finite loss {loss_value} at {context}", diagnostics_path=diagnostics_path
    )
