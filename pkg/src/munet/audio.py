"""Audio I/O and time-frequency transforms.

All functions are pure: they never modify their inputs.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-5
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


class AudioError(ValueError):
    """Unreadable, unsupported, or empty audio."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("Waveform samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # (F, T) complex
    window_size: int
    hop: int
    sample_rate: int
    center_padded: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape

    def magnitude(self) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(np.abs(self.bins), self.window_size, self.hop, self.sample_rate, self.center_padded)


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    values: np.ndarray  # (F, T) real, >= 0
    window_size: int
    hop: int
    sample_rate: int
    center_padded: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------- file I/O

def load_audio(path) -> Waveform:
    """Read a PCM16 / PCM24 / PCM32 / float32 WAV file as a mono waveform.

    Stereo is downmixed by averaging the two channels.
    """
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError for malformed headers
        raise AudioError(f"cannot read {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32, so one scale serves both
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample encoding {data.dtype} in {path}")
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise AudioError(f"{path}: {x.shape[1]} channels, only mono/stereo supported")
        x = x.mean(axis=1)
    if x.shape[0] == 0:
        raise AudioError(f"{path}: zero-length stream")
    return Waveform(x, int(rate))


def write_audio(w: Waveform, path) -> None:
    """Write ``w`` as a mono float32 WAV. Out-of-range samples are kept, with a warning."""
    samples = w.samples.astype(np.float32)
    if samples.size and np.max(np.abs(samples)) > 1.0:
        warnings.warn(f"{path}: samples exceed [-1, 1]; written unclipped", RuntimeWarning, stacklevel=2)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), int(w.sample_rate), samples)


# ---------------------------------------------------------------- resampling

def _resampling_filter(up: int, down: int) -> np.ndarray:
    ntaps = TAPS_PER_PHASE * up + 1  # odd length keeps the filter linear-phase and centred
    cutoff = 1.0 / max(up, down)
    return firwin(ntaps, cutoff, window=("kaiser", KAISER_BETA))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    if len(w) == 0:
        return Waveform(np.zeros(0), target_rate)
    g = math.gcd(int(target_rate), int(w.sample_rate))
    up, down = target_rate // g, w.sample_rate // g
    y = resample_poly(w.samples, up, down, window=_resampling_filter(up, down))
    if y.shape[0] < n_out:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return Waveform(y[:n_out], int(target_rate))


# ---------------------------------------------------------------- STFT

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, window_size: int, hop: int) -> np.ndarray:
    """Center-pad (reflect) and slice into (T, window_size) frames."""
    pad = window_size // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = len(x) // hop + 1
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return xp[idx]


def stft(w: Waveform, window_size: int = 1022, hop: int = 256) -> ComplexSpectrogram:
    """Short-time Fourier transform, shape (window_size/2 + 1, len/hop + 1)."""
    if window_size % 2:
        raise ValueError("window_size must be even")
    if hop > window_size or hop <= 0:
        raise ValueError("hop must be in (0, window_size]")
    if len(w) < hop:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one hop ({hop})")
    frames = frame_signal(w.samples, window_size, hop) * hann(window_size)
    bins = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(bins), window_size, hop, w.sample_rate, True)


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Least-squares overlap-add inverse of :func:`stft`.

    ``length`` defaults to ``(T - 1) * hop``, the length of any signal whose
    sample count is a multiple of the hop.
    """
    F, T = s.bins.shape
    n = s.window_size
    if F != n // 2 + 1:
        raise ValueError(f"{F} frequency bins do not match window_size {n}")
    if length is None:
        length = (T - 1) * s.hop
    win = hann(n)
    frames = np.fft.irfft(s.bins.T, n=n, axis=1) * win
    total = n + s.hop * (T - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for t in range(T):
        start = t * s.hop
        out[start : start + n] += frames[t]
        norm[start : start + n] += win_sq
    pad = n // 2 if s.center_padded else 0
    end = pad + length
    if end > total:
        raise ValueError(f"requested length {length} exceeds what {T} frames cover")
    out, norm = out[pad:end], norm[pad:end]
    if length and norm.min() < 1e-12:
        raise ValueError("degenerate overlap-add normalisation (window sum below 1e-12)")
    return Waveform(out / np.where(norm > 0, norm, 1.0), s.sample_rate)


def log_magnitude(m) -> np.ndarray:
    """Natural log with a 1e-5 floor, so silent bins stay finite."""
    values = m.values if isinstance(m, MagnitudeSpectrogram) else np.asarray(m)
    return np.log(np.maximum(values, LOG_FLOOR))


# ---------------------------------------------------------------- frequency resizing

def spec_resize(grid, target_f: int, direction: str):
    """Halve or double the frequency axis (axis -2) of a grid.

    ``down`` averages adjacent bin pairs. ``up`` is slope-limited linear
    interpolation around each coarse value; every output pair averages back
    to its source value exactly, and nonnegative input stays nonnegative.
    A :class:`MagnitudeSpectrogram` in gives one back (metadata unchanged).
    """
    if isinstance(grid, MagnitudeSpectrogram):
        values = spec_resize(grid.values, target_f, direction)
        return MagnitudeSpectrogram(values, grid.window_size, grid.hop, grid.sample_rate, grid.center_padded)
    x = np.asarray(grid)
    F = x.shape[-2]
    if direction == "down":
        if F % 2 or target_f * 2 != F:
            raise ValueError(f"cannot downsample {F} bins to {target_f}")
        return 0.5 * (x[..., 0::2, :] + x[..., 1::2, :])
    if direction == "up":
        if target_f != 2 * F:
            raise ValueError(f"cannot upsample {F} bins to {target_f}")
        return _upsample_pairs(x)
    raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


def _upsample_pairs(y: np.ndarray) -> np.ndarray:
    delta = np.zeros_like(y)
    if y.shape[-2] > 2:
        left = y[..., 1:-1, :] - y[..., :-2, :]
        right = y[..., 2:, :] - y[..., 1:-1, :]
        slope = np.where(np.sign(left) == np.sign(right), np.sign(left) * np.minimum(np.abs(left), np.abs(right)), 0.0)
        delta[..., 1:-1, :] = 0.25 * slope
    lo = y - delta
    hi = 2 * y - lo
    # keep the pair mean exact in floating point; rare misses fall back to repetition
    miss = 0.5 * (lo + hi) != y
    lo = np.where(miss, y, lo)
    hi = np.where(miss, y, hi)
    out = np.empty(y.shape[:-2] + (2 * y.shape[-2], y.shape[-1]), dtype=np.result_type(y, np.float32))
    out[..., 0::2, :] = lo
    out[..., 1::2, :] = hi
    return out
