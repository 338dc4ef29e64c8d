"""Separation with a trained network, oracle separators and throughput benchmarking."""
from __future__ import annotations

import logging
import time
import warnings
from pathlib import Path

import numpy as np

from munet.audio import Waveform, load_audio, resample, spec_resize, write_audio
from munet.dataset import CHUNK_SECONDS, SAMPLE_RATE
from munet.features import ChunkFeatures, chunk_features
from munet.masking import apply_mask, reconstruct
from munet.network import ConfigError, Network, load_checkpoint

log = logging.getLogger(__name__)


def _as_network(checkpoint, expect_sources: int | None = None) -> tuple[Network, dict]:
    if isinstance(checkpoint, Network):
        net, meta = checkpoint, {"state": {}}
    else:
        net, meta = load_checkpoint(checkpoint)
    if expect_sources is not None and net.config.out_channels != expect_sources:
        raise ConfigError(f"checkpoint produces {net.config.out_channels} sources, data has {expect_sources}")
    return net, meta


def masks_to_waveforms(masks: np.ndarray, feats: ChunkFeatures) -> np.ndarray:
    """(K, F/2, T) masks -> (K, n) waveforms via full-resolution masking and mixture phase."""
    full_mag = np.abs(feats.mixture.bins)
    F = full_mag.shape[0]
    n = feats.mixture_wave.shape[0]
    out = []
    for mask in masks:
        up = spec_resize(np.asarray(mask, dtype=np.float64), F, "up")
        out.append(reconstruct(apply_mask(up, full_mag), feats.mixture, length=n).samples)
    return np.stack(out)


def network_separator(checkpoint, expect_sources: int | None = None):
    net, _ = _as_network(checkpoint, expect_sources)

    def separate(feats: ChunkFeatures) -> np.ndarray:
        masks = net(feats.net_input[None], train_mode=False).data[0]
        return masks_to_waveforms(masks, feats)

    return separate


def oracle_separator(feats: ChunkFeatures) -> np.ndarray:
    """Ideal amplitude masks in place of the network (an upper-bound reference)."""
    return masks_to_waveforms(feats.target_masks, feats)


def mixture_separator(feats: ChunkFeatures) -> np.ndarray:
    """Every estimate is the mixture itself (the do-nothing baseline)."""
    k = feats.source_waves.shape[0]
    return np.repeat(feats.mixture_wave[None], k, axis=0)


def separate_waveform(net: Network, mixture: Waveform, chunk_seconds: float = CHUNK_SECONDS,
                      batch_size: int = 8) -> tuple[np.ndarray, bool]:
    """Separate a waveform (already at the model rate) chunk by chunk.

    Returns (K, len(mixture)) estimates and whether zero padding was needed.
    """
    n = len(mixture)
    chunk = int(round(chunk_seconds * mixture.sample_rate))
    n_chunks = max(1, -(-n // chunk))
    padded = n_chunks * chunk != n
    x = np.zeros(n_chunks * chunk)
    x[:n] = mixture.samples
    k = net.config.out_channels
    feats = [chunk_features(Waveform(x[i * chunk : (i + 1) * chunk], mixture.sample_rate)) for i in range(n_chunks)]
    pieces = []
    for start in range(0, n_chunks, batch_size):
        group = feats[start : start + batch_size]
        masks = net(np.stack([f.net_input for f in group]), train_mode=False).data
        for f, m in zip(group, masks):
            pieces.append(masks_to_waveforms(m, f))
    est = np.concatenate(pieces, axis=1)[:, :n]
    assert est.shape == (k, n)
    return est, padded


def separate_track(checkpoint, input_wav, out_dir, sample_rate: int = SAMPLE_RATE,
                   source_names: list[str] | None = None) -> list[Path]:
    """Write one WAV per source for ``input_wav`` into ``out_dir``."""
    net, meta = _as_network(checkpoint)
    names = source_names or meta["state"].get("source_names") or [f"source{i}" for i in range(net.config.out_channels)]
    if len(names) != net.config.out_channels:
        raise ConfigError(f"{len(names)} source names for a {net.config.out_channels}-source checkpoint")
    mixture = resample(load_audio(input_wav), sample_rate)
    est, padded = separate_waveform(net, mixture)
    if len(mixture) < int(round(CHUNK_SECONDS * sample_rate)):
        warnings.warn(f"{input_wav} is shorter than one chunk; zero padded", RuntimeWarning, stacklevel=2)
    elif padded:
        log.info("%s: last chunk zero padded", input_wav)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, x in zip(names, est):
        p = out_dir / f"{name}.wav"
        write_audio(Waveform(x, sample_rate), p)
        paths.append(p)
    return paths


def bench_inference(checkpoint, batch_size: int = 8, duration: float = 5.0, seed: int = 0,
                    input_shape: tuple[int, int] = (256, 256)) -> dict:
    """Forward random batches for ``duration`` seconds; report chunks per second.

    All K masks come out of each single forward pass, so the forward-call
    count equals the batch count regardless of K.
    """
    net, _ = _as_network(checkpoint)
    rng = np.random.default_rng(seed)
    calls_before = net.forward_calls
    rates = []
    batches = 0
    t_end = time.perf_counter() + duration
    while True:
        x = rng.normal(-2.0, 2.0, size=(batch_size, 1) + tuple(input_shape)).astype(net.dtype)
        t0 = time.perf_counter()
        out = net(x, train_mode=False)
        dt = time.perf_counter() - t0
        assert out.shape[1] == net.config.out_channels
        rates.append(batch_size / dt)
        batches += 1
        if time.perf_counter() >= t_end:
            break
    return {
        "batch_size": batch_size,
        "batches": batches,
        "forward_calls": net.forward_calls - calls_before,
        "sources_per_forward": net.config.out_channels,
        "chunks_per_second_mean": float(np.mean(rates)),
        "chunks_per_second_std": float(np.std(rates)),
    }
