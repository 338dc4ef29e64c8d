"""Manifest records -> spectrogram features for training, validation and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from munet.audio import ComplexSpectrogram, Waveform, log_magnitude, spec_resize, stft
from munet.dataset import Manifest, SampleRecord, load_track
from munet.masking import compute_iam

WINDOW_SIZE = 1022
HOP = 256


@dataclass
class ChunkFeatures:
    mixture: ComplexSpectrogram  # full resolution (F=512)
    mixture_wave: np.ndarray
    source_waves: np.ndarray  # (K, n)
    net_input: np.ndarray  # (1, F/2, T) log magnitude
    mixture_mag: np.ndarray  # (1, F/2, T)
    source_mags: np.ndarray  # (K, F/2, T)
    target_masks: np.ndarray  # (K, F/2, T) IAM at training resolution


def chunk_features(mixture: Waveform, sources: list[Waveform] = (), window_size: int = WINDOW_SIZE,
                   hop: int = HOP) -> ChunkFeatures:
    """Features of one chunk; ``sources`` may be empty when only separating."""
    mix_spec = stft(mixture, window_size, hop)
    F, T = mix_spec.shape
    mix_small = spec_resize(np.abs(mix_spec.bins), F // 2, "down")
    src_small = np.zeros((len(sources), F // 2, T))
    masks = np.zeros_like(src_small)
    for i, s in enumerate(sources):
        src_small[i] = spec_resize(np.abs(stft(s, window_size, hop).bins), F // 2, "down")
        masks[i] = compute_iam(src_small[i], mix_small)
    return ChunkFeatures(
        mixture=mix_spec,
        mixture_wave=mixture.samples,
        source_waves=np.array([s.samples for s in sources]).reshape(len(sources), len(mixture)),
        net_input=log_magnitude(mix_small)[None],
        mixture_mag=mix_small[None],
        source_mags=src_small,
        target_masks=masks,
    )


class SampleLoader:
    """Loads and caches resampled tracks and per-record features."""

    def __init__(self, manifest: Manifest, cache: bool = True):
        self.manifest = manifest
        self.cache = cache
        self._tracks: dict[str, tuple[Waveform, list[Waveform]]] = {}
        self._features: dict[tuple[str, int], ChunkFeatures] = {}

    def track(self, track_id: str):
        if track_id not in self._tracks:
            entry = self.manifest.tracks[track_id]
            audio = load_track(entry, self.manifest.sample_rate, self.manifest.base_dir)
            if not self.cache:
                return audio
            self._tracks[track_id] = audio
        return self._tracks[track_id]

    def features(self, record: SampleRecord) -> ChunkFeatures:
        key = (record.track_id, record.chunk_index)
        if key in self._features:
            return self._features[key]
        mix, stems = self.track(record.track_id)
        n = self.manifest.chunk_length
        sl = slice(record.offset, record.offset + n)
        sr = self.manifest.sample_rate
        feats = chunk_features(Waveform(mix.samples[sl], sr), [Waveform(s.samples[sl], sr) for s in stems])
        if self.cache:
            self._features[key] = feats
        return feats

    def batch(self, records: list[SampleRecord], dtype=np.float32) -> dict[str, np.ndarray]:
        feats = [self.features(r) for r in records]
        return {
            "input": np.stack([f.net_input for f in feats]).astype(dtype),
            "mixture_mag": np.stack([f.mixture_mag for f in feats]).astype(dtype),
            "source_mags": np.stack([f.source_mags for f in feats]).astype(dtype),
            "target_masks": np.stack([f.target_masks for f in feats]).astype(dtype),
        }
