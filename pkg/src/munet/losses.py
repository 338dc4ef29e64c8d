"""Per-source loss terms, the weighted multi-task loss and its weighting strategies.

Strategies
----------
UW          unit weights.
DWA         dynamic weight average over the per-task loss descent rate.
EBW_P1      max_j E_j / E_i with dataset-level source energies.
EBW_InstP1  the same ratio, recomputed from every training batch.
EBW_P2      max_j E_j^2 / E_i^2.
OH          w_i proportional to 1 / E_i, normalised to sum to 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from munet import autodiff as ad
from munet.audio import MagnitudeSpectrogram
from munet.autodiff import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("UW", "DWA", "EBW_P1", "EBW_InstP1", "EBW_P2", "OH")
ENERGY_STRATEGIES = ("EBW_P1", "EBW_P2", "OH")


def _grid(m) -> np.ndarray:
    return m.values if isinstance(m, MagnitudeSpectrogram) else np.asarray(m)


# ---------------------------------------------------------------- energies

def source_energy(mags) -> float:
    """Mean over samples of the per-bin average squared magnitude."""
    mags = [_grid(m) for m in mags]
    if not mags:
        raise ValueError("source_energy needs at least one spectrogram")
    shape = mags[0].shape
    if any(m.shape != shape for m in mags):
        raise ValueError("all spectrograms of a source must share one shape")
    return float(np.mean([np.mean(np.square(m, dtype=np.float64)) for m in mags]))


@dataclass
class EnergyStats:
    per_source_energy: list[float]
    sample_count: int
    names: list[str]


# ---------------------------------------------------------------- loss terms

def direct_loss(target_mask, est_mask):
    """Mean absolute difference between the IAM target and the estimated mask."""
    if isinstance(est_mask, Tensor):
        return ad.l1_mean(ad.sub(est_mask, np.asarray(target_mask, dtype=est_mask.dtype)))
    t, e = np.asarray(target_mask), np.asarray(est_mask)
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {e.shape}")
    return float(np.mean(np.abs(t - e)))


def indirect_loss(target_mag, est_mask, mixture_mag):
    """Mean absolute difference between the true source magnitude and mask * mixture."""
    s, mix = _grid(target_mag), _grid(mixture_mag)
    if isinstance(est_mask, Tensor):
        est = ad.mul(est_mask, mix.astype(est_mask.dtype))
        return ad.l1_mean(ad.sub(est, s.astype(est_mask.dtype)))
    e = np.asarray(est_mask)
    if not (s.shape == e.shape == mix.shape):
        raise ValueError(f"shape mismatch: {s.shape}, {e.shape}, {mix.shape}")
    return float(np.mean(np.abs(s - e * mix)))


def task_losses(est_masks: Tensor, kind: str, *, target_masks=None, source_mags=None, mixture_mags=None) -> Tensor:
    """All K per-source losses of a batch from one forward pass, as a (K,) tensor.

    ``est_masks`` is (B, K, F, T). For ``kind="direct"`` pass ``target_masks``
    (B, K, F, T); for ``"indirect"`` pass ``source_mags`` (B, K, F, T) and
    ``mixture_mags`` (B, 1, F, T).
    """
    dt = est_masks.dtype
    if kind == "direct":
        diff = ad.sub(est_masks, np.asarray(target_masks, dtype=dt))
    elif kind == "indirect":
        est = ad.mul(est_masks, np.asarray(mixture_mags, dtype=dt))
        diff = ad.sub(est, np.asarray(source_mags, dtype=dt))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return ad.l1_mean(diff, axis=(0, 2, 3))


def total_loss(per_task, state_or_weights):
    """Weighted sum of the K task losses; weights are constants for the step."""
    weights = state_or_weights.weights if isinstance(state_or_weights, WeightState) else state_or_weights
    w = np.asarray(weights, dtype=np.float64)
    if isinstance(per_task, Tensor):
        if per_task.shape != w.shape:
            raise ValueError(f"{per_task.shape[0] if per_task.shape else 1} task losses for {w.size} weights")
        return ad.sum_(ad.mul(per_task, w.astype(per_task.dtype)))
    if any(isinstance(l, Tensor) for l in per_task):
        if len(per_task) != w.size:
            raise ValueError(f"{len(per_task)} task losses for {w.size} weights")
        out = ad.mul(per_task[0], float(w[0]))
        for l, wi in zip(per_task[1:], w[1:]):
            out = ad.add(out, ad.mul(l, float(wi)))
        return out
    L = np.asarray(per_task, dtype=np.float64)
    if L.shape != w.shape:
        raise ValueError(f"{L.size} task losses for {w.size} weights")
    return float(np.dot(w, L))


# ---------------------------------------------------------------- weights

def ebw_weights(energies, variant: str = "P1") -> np.ndarray:
    E = np.asarray(energies, dtype=np.float64)
    if np.any(E <= 0) or not np.all(np.isfinite(E)):
        raise ValueError("energy-based weights need strictly positive energies")
    if variant == "P1":
        return E.max() / E
    if variant == "P2":
        return E.max() ** 2 / E**2
    raise ValueError(f"unknown EBW variant {variant!r}")


def oh_weights(energies) -> np.ndarray:
    """Solve w_i E_i = const, sum(w) = 1."""
    E = np.asarray(energies, dtype=np.float64)
    if np.any(E <= 0):
        raise ValueError("Oh et al. weights need strictly positive energies")
    inv = 1.0 / E
    return inv / inv.sum()


def dwa_weights(gamma, temperature: float = 2.0) -> np.ndarray:
    g = np.asarray(gamma, dtype=np.float64) / temperature
    e = np.exp(g - g.max())
    return g.size * e / e.sum()


@dataclass
class WeightState:
    strategy: str
    weights: np.ndarray
    temperature: float = 2.0
    dwa_history: list[list[float]] = field(default_factory=list)
    global_energies: list[float] | None = None
    epoch_index: int = 1
    fallback_count: int = 0

    @classmethod
    def initial(cls, strategy: str, k: int, energies=None, temperature: float = 2.0) -> "WeightState":
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        if energies is not None and len(energies) != k:
            raise ValueError(f"{len(energies)} energies for {k} sources")
        if strategy in ENERGY_STRATEGIES + ("EBW_InstP1",) and energies is None:
            raise ValueError(f"strategy {strategy} needs global source energies")
        if strategy == "EBW_P1":
            w = ebw_weights(energies, "P1")
        elif strategy == "EBW_P2":
            w = ebw_weights(energies, "P2")
        elif strategy == "OH":
            w = oh_weights(energies)
        elif strategy == "EBW_InstP1":
            w = ebw_weights(energies, "P1")
        else:
            w = np.ones(k)
        return cls(strategy, np.asarray(w, dtype=np.float64), temperature,
                   global_energies=None if energies is None else [float(e) for e in energies])

    @property
    def k(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "weights": [float(w) for w in self.weights],
            "temperature": self.temperature,
            "dwa_history": self.dwa_history,
            "global_energies": self.global_energies,
            "epoch_index": self.epoch_index,
            "fallback_count": self.fallback_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightState":
        return cls(d["strategy"], np.asarray(d["weights"], dtype=np.float64), d["temperature"],
                   [list(h) for h in d["dwa_history"]], d["global_energies"], d["epoch_index"], d["fallback_count"])


def dwa_update(state: WeightState, epoch_avg_losses) -> WeightState:
    """Close an epoch: record its unweighted task losses and set next epoch's weights.

    Weights stay at 1 until two epochs of history exist, i.e. for epochs 1 and 2.
    """
    if state.strategy != "DWA":
        raise ValueError(f"dwa_update on a {state.strategy} state")
    L = [float(x) for x in epoch_avg_losses]
    if len(L) != state.k:
        raise ValueError(f"{len(L)} losses for {state.k} tasks")
    if any(not (x > 0) for x in L):
        raise ValueError(f"DWA needs positive loss history, got {L}")
    history = (state.dwa_history + [L])[-2:]
    if len(history) < 2:
        weights = np.ones(state.k)
    else:
        gamma = np.asarray(history[1]) / np.asarray(history[0])
        weights = dwa_weights(gamma, state.temperature)
    return WeightState("DWA", weights, state.temperature, history, state.global_energies,
                       state.epoch_index + 1, state.fallback_count)


def ebw_inst_weights(batch_mags, state: WeightState | None = None) -> np.ndarray:
    """Per-batch EBW_P1 weights.

    ``batch_mags`` is a sequence over sources, each a list/array of that
    source's magnitude grids in the batch. A source with zero batch energy
    makes the batch fall back to the state's global energies.
    """
    energies = np.array([source_energy(list(m)) for m in batch_mags])
    if np.all(energies > 0):
        return ebw_weights(energies, "P1")
    if state is None or state.global_energies is None:
        raise ValueError("a source has zero energy in this batch and no global energies are available")
    state.fallback_count += 1
    log.warning("batch with a silent source; using global energies (fallback #%d)", state.fallback_count)
    return ebw_weights(state.global_energies, "P1")


def strategy_weight_table(energies) -> dict[str, list[float]]:
    """Weights every strategy assigns before training starts, for reporting."""
    k = len(energies)
    return {
        "UW": [1.0] * k,
        "DWA": [1.0] * k,
        "EBW_P1": ebw_weights(energies, "P1").tolist(),
        "EBW_InstP1": ebw_weights(energies, "P1").tolist(),
        "EBW_P2": ebw_weights(energies, "P2").tolist(),
        "OH": oh_weights(energies).tolist(),
    }
