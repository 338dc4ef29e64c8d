"""Training loop: seeded batches, multi-task loss, SGD, validation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from munet import losses as L
from munet.dataset import DataError, Manifest, SampleRecord
from munet.features import SampleLoader
from munet.network import ConfigError, Network, save_checkpoint, sgd_step

log = logging.getLogger(__name__)

LOSS_KINDS = ("direct", "indirect")
TRAIN_LOG = "train_log.jsonl"
TIMING_LOG = "timing.jsonl"
BEST_CHECKPOINT = "best.munet"


class NumericError(RuntimeError):
    """A loss or gradient became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.01
    loss_kind: str = "indirect"
    strategy: str = "UW"
    seed: int = 0
    checkpoint_every: int = 10
    mask_ceiling: float = 10.0
    filter_silent: bool = True
    temperature: float = 2.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "checkpoint_every"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate >= 0
                and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be a finite number >= 0, got {self.learning_rate!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.strategy not in L.STRATEGIES:
            raise ConfigError(f"strategy must be one of {L.STRATEGIES}, got {self.strategy!r}")
        if not self.mask_ceiling > 0:
            raise ConfigError("mask_ceiling must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    train_losses: list[float]
    weighted_total: float
    valid_losses: list[float] | None
    weights: list[float]
    steps: int
    sample_iterations: int
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


def train_records(manifest: Manifest, config: TrainConfig) -> list[SampleRecord]:
    records = manifest.split("train")
    if config.filter_silent:
        records = [r for r in records if not r.any_silent]
    if not records:
        raise DataError("no train records to train on")
    return records


def global_energies(loader: SampleLoader, records: list[SampleRecord], k: int) -> list[float]:
    """Per-source energy over the train records, at training resolution."""
    per_source = [[] for _ in range(k)]
    for r in records:
        mags = loader.features(r).source_mags
        for i in range(k):
            per_source[i].append(mags[i])
    return [L.source_energy(m) for m in per_source]


def initial_state(loader: SampleLoader, records: list[SampleRecord], config: TrainConfig, k: int) -> L.WeightState:
    energies = None
    if config.strategy in L.ENERGY_STRATEGIES + ("EBW_InstP1",):
        energies = global_energies(loader, records, k)
        if min(energies) <= 0:
            raise DataError(f"a source has zero energy over the train split: {energies}")
    return L.WeightState.initial(config.strategy, k, energies, config.temperature)


def _batch_losses(net: Network, batch: dict, config: TrainConfig, train_mode: bool):
    est = net(batch["input"], train_mode=train_mode)
    return L.task_losses(est, config.loss_kind, target_masks=batch["target_masks"],
                         source_mags=batch["source_mags"], mixture_mags=batch["mixture_mag"])


def train_epoch(net: Network, manifest: Manifest, config: TrainConfig, state: L.WeightState,
                loader: SampleLoader | None = None, epoch: int = 1) -> EpochReport:
    """One pass over the (seeded) shuffled train records.

    Each batch takes one forward pass producing all K masks, K task losses,
    their weighted sum, a backward pass and an SGD step. ``state`` supplies the
    weights; for EBW_InstP1 they are recomputed from every batch.
    """
    _check_net(net, manifest, config)
    loader = loader or SampleLoader(manifest)
    records = train_records(manifest, config)
    t0 = time.perf_counter()
    order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
    task_sums = np.zeros(len(manifest.source_names))
    total_sum = 0.0
    weight_sum = np.zeros_like(task_sums)
    steps = iterations = 0
    for start in range(0, len(order), config.batch_size):
        batch_records = [records[i] for i in order[start : start + config.batch_size]]
        batch = loader.batch(batch_records, dtype=net.dtype)
        if config.strategy == "EBW_InstP1":
            weights = L.ebw_inst_weights(np.swapaxes(batch["source_mags"], 0, 1), state)
        else:
            weights = state.weights
        per_task = _batch_losses(net, batch, config, train_mode=True)
        total = L.total_loss(per_task, weights)
        values = per_task.data.astype(np.float64)
        if not (np.all(np.isfinite(values)) and np.isfinite(total.data)):
            ids = [f"{r.track_id}:{r.chunk_index}" for r in batch_records]
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {steps} ({', '.join(ids)}): {values}")
        total.backward()
        for name, p in net.named_parameters():
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name} at epoch {epoch}, batch {steps}")
        sgd_step(net, config.learning_rate)
        task_sums += values
        total_sum += float(total.data)
        weight_sum += weights
        steps += 1
        iterations += len(batch_records)
    return EpochReport(
        epoch=epoch,
        train_losses=(task_sums / steps).tolist(),
        weighted_total=total_sum / steps,
        valid_losses=None,
        weights=(weight_sum / steps).tolist(),
        steps=steps,
        sample_iterations=iterations,
        wall_time=time.perf_counter() - t0,
    )


def validate(net: Network, manifest: Manifest, config: TrainConfig, loader: SampleLoader | None = None,
             split: str = "valid") -> list[float]:
    """Unweighted per-task losses averaged over ``split``; eval mode, no updates."""
    _check_net(net, manifest, config)
    records = manifest.split(split)
    if not records:
        raise DataError(f"the {split} split is empty")
    loader = loader or SampleLoader(manifest)
    sums = np.zeros(len(manifest.source_names))
    for start in range(0, len(records), config.batch_size):
        group = records[start : start + config.batch_size]
        per_task = _batch_losses(net, loader.batch(group, dtype=net.dtype), config, train_mode=False)
        sums += per_task.data.astype(np.float64) * len(group)
    return (sums / len(records)).tolist()


def _check_net(net: Network, manifest: Manifest, config: TrainConfig) -> None:
    k = len(manifest.source_names)
    if net.config.out_channels != k:
        raise ConfigError(f"network has {net.config.out_channels} outputs, manifest has {k} sources")
    if net.config.mask_ceiling != config.mask_ceiling:
        raise ConfigError(f"network mask ceiling {net.config.mask_ceiling} != train config {config.mask_ceiling}")


def _state_blob(config: TrainConfig, state: L.WeightState, manifest: Manifest, epoch: int) -> dict:
    return {"train_config": config.to_dict(), "weight_state": state.to_dict(),
            "source_names": list(manifest.source_names), "sample_rate": manifest.sample_rate, "epoch": epoch}


def fit(net: Network, manifest: Manifest, config: TrainConfig, out_dir) -> tuple[list[EpochReport], Path]:
    """Train for ``config.epochs`` epochs, logging and checkpointing into ``out_dir``.

    Writes ``train_log.jsonl`` (one deterministic EpochReport per line),
    ``timing.jsonl`` (wall times), ``checkpoints/epoch_XXXX.munet`` every
    ``checkpoint_every`` epochs and ``best.munet``, chosen by mean validation
    loss (mean train loss when there is no validation split).
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    _check_net(net, manifest, config)
    loader = SampleLoader(manifest)
    records = train_records(manifest, config)
    state = initial_state(loader, records, config, len(manifest.source_names))
    has_valid = bool(manifest.split("valid"))
    log.info("training on %d records (%d sources), strategy %s, initial weights %s",
             len(records), len(manifest.source_names), config.strategy, np.round(state.weights, 4).tolist())
    best_path = out_dir / BEST_CHECKPOINT
    best_score = math.inf
    reports = []
    with open(out_dir / TRAIN_LOG, "w") as log_fh, open(out_dir / TIMING_LOG, "w") as time_fh:
        for epoch in range(1, config.epochs + 1):
            report = train_epoch(net, manifest, config, state, loader, epoch)
            if has_valid:
                report.valid_losses = validate(net, manifest, config, loader)
            if config.strategy == "DWA":
                state = L.dwa_update(state, report.train_losses)
            else:
                state.epoch_index += 1
            reports.append(report)
            log_fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            log_fh.flush()
            time_fh.write(json.dumps({"epoch": epoch, "wall_time": report.wall_time}) + "\n")
            time_fh.flush()
            log.info("epoch %d: train %s total %.5f valid %s (%.1fs)", epoch, np.round(report.train_losses, 5).tolist(),
                     report.weighted_total, None if report.valid_losses is None else
                     np.round(report.valid_losses, 5).tolist(), report.wall_time)
            blob = _state_blob(config, state, manifest, epoch)
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_checkpoint(net, out_dir / "checkpoints" / f"epoch_{epoch:04d}.munet", epoch, blob)
            score = float(np.mean(report.valid_losses if has_valid else report.train_losses))
            if score < best_score:
                best_score = score
                save_checkpoint(net, best_path, epoch, blob)
    return reports, best_path


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
