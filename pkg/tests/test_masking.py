import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from munet.audio import MagnitudeSpectrogram, Waveform, istft, stft
from munet.masking import apply_mask, compute_iam, reconstruct
from munet.metrics import bss_eval

SR = 10880


def test_iam_examples():
    np.testing.assert_array_equal(compute_iam(np.array([2.0, 30.0, 0.0]), np.array([4.0, 2.0, 0.0])), [0.5, 10.0, 0.0])


def test_iam_silent_mixture_bins():
    assert compute_iam(np.array([5.0]), np.array([1e-9]))[0] == 0.0


def test_iam_shape_mismatch():
    with pytest.raises(ValueError):
        compute_iam(np.zeros((2, 2)), np.zeros((2, 3)))


nonneg = arrays(np.float64, (6, 5), elements=st.floats(0, 1e4))


@given(nonneg, nonneg)
def test_iam_range(s, mix):
    m = compute_iam(s, mix)
    assert np.all(m >= 0) and np.all(m <= 10)


def test_apply_mask_identity_and_zero(rng):
    mix = MagnitudeSpectrogram(np.abs(rng.standard_normal((4, 3))), 6, 2, SR)
    out = apply_mask(np.ones((4, 3)), mix)
    assert isinstance(out, MagnitudeSpectrogram)
    np.testing.assert_array_equal(out.values, mix.values)
    assert np.all(apply_mask(np.zeros((4, 3)), mix).values == 0)
    with pytest.raises(ValueError):
        apply_mask(np.ones((3, 3)), mix)


def test_iam_recovers_magnitudes_where_unclipped(rng):
    n = 65280
    a, b = rng.standard_normal(n), 0.3 * np.sin(2 * np.pi * 300 * np.arange(n) / SR)
    mix = np.abs(stft(Waveform(a + b, SR)).bins)
    sa = np.abs(stft(Waveform(a, SR)).bins)
    m = compute_iam(sa, mix)
    est = apply_mask(m, mix)
    ok = (m < 10) & (mix >= 1e-8)
    assert np.max(np.abs(est[ok] - sa[ok])) < 1e-6


def test_mask_additivity_when_unclipped(rng):
    mix = np.abs(rng.standard_normal((8, 8))) + 1.0
    parts = rng.dirichlet([1, 1, 1], size=(8, 8)).transpose(2, 0, 1) * mix
    masks = [compute_iam(p, mix) for p in parts]
    np.testing.assert_allclose(sum(m * mix for m in masks), parts.sum(axis=0), rtol=1e-12)


def test_reconstruct_identity_chain(rng):
    x = rng.standard_normal(65280) * 0.1
    spec = stft(Waveform(x, SR))
    y = reconstruct(apply_mask(np.ones(spec.shape), np.abs(spec.bins)), spec, length=len(x)).samples
    assert len(y) == len(x)
    assert np.max(np.abs(y - x)) < 1e-6
    np.testing.assert_allclose(y, istft(spec, len(x)).samples, atol=1e-12)


def test_reconstruct_zero_and_shape(rng):
    spec = stft(Waveform(rng.standard_normal(4096), SR))
    assert np.all(reconstruct(np.zeros(spec.shape), spec, 4096).samples == 0)
    with pytest.raises(ValueError):
        reconstruct(np.zeros((3, 3)), spec)


def test_iam_tone_in_noise_sdr():
    t = np.arange(65280) / SR
    tone = 0.5 * np.sin(2 * np.pi * 440 * t)
    noise = 0.1 * np.random.default_rng(3).standard_normal(t.size)
    spec = stft(Waveform(tone + noise, SR))
    m = compute_iam(np.abs(stft(Waveform(tone, SR)).bins), np.abs(spec.bins))
    est = reconstruct(apply_mask(m, np.abs(spec.bins)), spec, len(t)).samples
    sdr = bss_eval(np.stack([tone, noise]), np.stack([est, noise]), 64)[0, 0]
    assert sdr >= 20
