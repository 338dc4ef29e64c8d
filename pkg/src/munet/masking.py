"""Ideal amplitude masks, mask application and mixture-phase reconstruction."""
from __future__ import annotations

import numpy as np

from munet.audio import ComplexSpectrogram, MagnitudeSpectrogram, Waveform, istft

MASK_CEILING = 10.0
SILENT_BIN = 1e-8


def _values(m) -> np.ndarray:
    return m.values if isinstance(m, MagnitudeSpectrogram) else np.asarray(m)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def compute_iam(source_mag, mixture_mag, ceiling: float = MASK_CEILING) -> np.ndarray:
    """Source/mixture magnitude ratio clipped at ``ceiling``; 0 where the mixture is silent."""
    s, mix = _values(source_mag), _values(mixture_mag)
    _check_shapes(s, mix)
    silent = mix < SILENT_BIN
    ratio = s / np.where(silent, 1.0, mix)
    return np.where(silent, 0.0, np.minimum(ratio, ceiling))


def apply_mask(mask, mixture_mag):
    """Elementwise product; returns the same container type as ``mixture_mag``."""
    m = np.asarray(mask)
    values = _values(mixture_mag)
    _check_shapes(m, values)
    out = m * values
    if isinstance(mixture_mag, MagnitudeSpectrogram):
        return MagnitudeSpectrogram(out, mixture_mag.window_size, mixture_mag.hop,
                                    mixture_mag.sample_rate, mixture_mag.center_padded)
    return out


def reconstruct(est_mag, mixture: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Give ``est_mag`` the mixture's phase and invert the STFT."""
    mag = _values(est_mag)
    _check_shapes(mag, mixture.bins)
    absmix = np.abs(mixture.bins)
    phase = np.where(absmix > 0, mixture.bins / np.where(absmix > 0, absmix, 1.0), 1.0)
    bins = mag * phase
    spec = ComplexSpectrogram(bins, mixture.window_size, mixture.hop, mixture.sample_rate, mixture.center_padded)
    return istft(spec, length)
