import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from munet.metrics import (EvalResult, MetricError, aggregate, bss_eval, decompose, evaluate_manifest, sdr_sir_sar,
                           write_results)


def delayed(refs, L):
    """(N + L - 1, K * L) design matrix of 0..L-1 sample delays."""
    K, N = refs.shape
    A = np.zeros((N + L - 1, K * L))
    for i in range(K):
        for d in range(L):
            A[d : d + N, i * L + d] = refs[i]
    return A


def dense_oracle(refs, est, t, L):
    K, N = refs.shape
    e = np.concatenate([est, np.zeros(L - 1)])
    A = delayed(refs, L)
    At = A[:, t * L : (t + 1) * L]
    s_t = At @ np.linalg.lstsq(At, e, rcond=None)[0]
    p_all = A @ np.linalg.lstsq(A, e, rcond=None)[0]
    return s_t, p_all - s_t, e - p_all


def ratio_db(a, b):
    return 10 * math.log10(np.sum(a**2) / np.sum(b**2))


def orthogonal_case(noise_scale=1.0, n=2048, seed=0):
    r = np.random.default_rng(seed)
    ref = r.standard_normal(n)
    noise = r.standard_normal(n)
    noise -= ref * (noise @ ref) / (ref @ ref)
    noise *= math.sqrt(np.sum(ref**2) / 100 / np.sum(noise**2)) * noise_scale
    return ref, noise


@pytest.mark.parametrize("L", [1, 2, 4, 8])
def test_matches_dense_oracle(L):
    r = np.random.default_rng(L)
    refs = r.standard_normal((3, 700))
    est = refs[0] + 0.3 * refs[1] + 0.1 * r.standard_normal(700)
    for t in range(3):
        got = decompose(refs, est, t, L)
        want = dense_oracle(refs, est, t, L)
        for g, w in zip(got, want):
            assert np.max(np.abs(g - w)) < 1e-6
        m = sdr_sir_sar(*got)
        w = (ratio_db(want[0], want[1] + want[2]), ratio_db(want[0], want[1]), ratio_db(want[0] + want[1], want[2]))
        np.testing.assert_allclose(m, w, atol=1e-6)


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4, 8]), st.integers(2, 3), st.integers(64, 4096))
def test_oracle_property(seed, L, K, N):
    r = np.random.default_rng(seed)
    refs = r.standard_normal((K, N))
    est = r.standard_normal(K) @ refs + 0.5 * r.standard_normal(N)
    got = decompose(refs, est, 0, L)
    want = dense_oracle(refs, est, 0, L)
    scale = np.linalg.norm(est)
    for g, w in zip(got, want):
        assert np.max(np.abs(g - w)) < 1e-6 * max(1.0, scale)


def test_perfect_estimate_infinite(rng):
    refs = rng.standard_normal((2, 1000))
    s, ei, ea = decompose(refs, refs[0], 0, 4)
    assert np.max(np.abs(ei)) < 1e-9 and np.max(np.abs(ea)) < 1e-9
    assert sdr_sir_sar(s, ei, ea) == (math.inf, math.inf, math.inf)


def test_estimate_orthogonal_to_references():
    r = np.random.default_rng(2)
    refs = r.standard_normal((2, 500))
    q, _ = np.linalg.qr(np.column_stack([refs.T, r.standard_normal(500)]))
    est = q[:, 2]
    s, ei, ea = decompose(refs, est, 0, 1)
    assert np.max(np.abs(s)) < 1e-9 and np.max(np.abs(ei)) < 1e-9
    sdr, sir, sar = sdr_sir_sar(s, ei, ea)
    assert sdr == -math.inf and sar == -math.inf


def test_orthogonal_noise_twenty_db():
    ref, noise = orthogonal_case()
    sdr, sir, sar = sdr_sir_sar(*decompose(ref[None], ref + noise, 0, 1))
    assert sdr == pytest.approx(20.0, abs=0.01)
    assert sar == pytest.approx(20.0, abs=0.01)
    assert sir == math.inf


def test_halving_noise_power_adds_3db():
    ref, noise = orthogonal_case()
    a = sdr_sir_sar(*decompose(ref[None], ref + noise, 0, 1))[0]
    b = sdr_sir_sar(*decompose(ref[None], ref + noise / math.sqrt(2), 0, 1))[0]
    assert b - a == pytest.approx(10 * math.log10(2), abs=1e-6)


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_scale_invariance(c, seed):
    r = np.random.default_rng(seed)
    refs = r.standard_normal((2, 512))
    est = refs[0] + 0.4 * refs[1] + 0.2 * r.standard_normal(512)
    a = np.array(sdr_sir_sar(*decompose(refs, est, 0, 4)))
    b = np.array(sdr_sir_sar(*decompose(refs, c * est, 0, 4)))
    assert np.max(np.abs(a - b)) < 1e-6


def test_additivity_and_residual_orthogonality(rng):
    refs = rng.standard_normal((3, 1024))
    est = refs[1] + 0.5 * rng.standard_normal(1024)
    L = 8
    s, ei, ea = decompose(refs, est, 1, L)
    padded = np.concatenate([est, np.zeros(L - 1)])
    assert np.max(np.abs(s + ei + ea - padded)) <= 1e-9 * np.max(np.abs(padded))
    A = delayed(refs, L)
    assert np.max(np.abs(A.T @ ea)) < 1e-6 * np.linalg.norm(A, axis=0).max() * np.linalg.norm(ea)


def test_errors(rng):
    refs = rng.standard_normal((2, 100))
    with pytest.raises(MetricError, match="silent"):
        decompose(np.vstack([refs[0], np.zeros(100)]), refs[0], 0, 4)
    with pytest.raises(MetricError):
        decompose(refs, refs[0][:50], 0, 4)
    with pytest.raises(MetricError):
        decompose(refs, refs[0], 5, 4)
    with pytest.raises(MetricError):
        decompose(refs, refs[0], 0, 0)
    with pytest.raises(MetricError, match="undefined"):
        sdr_sir_sar(np.zeros(5), np.zeros(5), np.zeros(5))


def test_rank_deficient_flagged(rng):
    a = rng.standard_normal(300)
    refs = np.vstack([a, 2 * a])
    d = decompose(refs, a + 0.1 * rng.standard_normal(300), 0, 2)
    assert d.rank_deficient
    assert all(np.all(np.isfinite(c)) for c in d)


def test_bss_eval_shape(rng):
    refs = rng.standard_normal((3, 400))
    assert bss_eval(refs, refs + 0.1 * rng.standard_normal((3, 400)), 4).shape == (3, 3)


def test_aggregate_excludes_infinite_and_pools():
    rows = [EvalResult("a", 0, "x", 10.0, 12.0, 11.0, 4), EvalResult("a", 0, "y", math.inf, math.inf, math.inf, 4),
            EvalResult("b", 0, "x", 20.0, 22.0, 21.0, 4), EvalResult("b", 0, "y", 0.0, 1.0, 2.0, 4)]
    rep = aggregate(rows, ["x", "y"], skipped=1, filter_length=4)
    assert rep.sources["x"]["SDR"] == {"mean": 15.0, "std": 5.0, "median": 15.0, "count": 2}
    assert rep.sources["y"]["SDR"]["count"] == 1
    assert rep.overall["SDR"]["mean"] == pytest.approx(10.0)
    assert rep.infinite_counts["SDR"] == 1 and rep.evaluated_chunks == 2 and rep.skipped_chunks == 1


def test_write_results(tmp_path):
    rows = [EvalResult("a", 0, "x", 1.0, 2.0, 3.0, 4)]
    csv_path, json_path = write_results(rows, aggregate(rows, ["x"]), tmp_path / "ev")
    assert csv_path.read_text().splitlines()[0] == "track_id,chunk_index,source,SDR,SIR,SAR"
    assert json.loads(json_path.read_text())["sources"]["x"]["SDR"]["mean"] == 1.0


def test_iam_oracle_on_manifest(synth_manifest):
    from munet.inference import oracle_separator

    rep = evaluate_manifest(synth_manifest, split="train", separator=oracle_separator, filter_length=64)
    for name in synth_manifest.source_names:
        assert rep.sources[name]["SDR"]["mean"] - 3 * rep.sources[name]["SDR"]["std"] > 20 or \
            rep.sources[name]["SDR"]["mean"] > 20


def test_mixture_baseline_matches_dense_oracle(synth_manifest):
    from munet.features import SampleLoader
    from munet.inference import mixture_separator

    rec = synth_manifest.split("train")[0]
    feats = SampleLoader(synth_manifest).features(rec)
    est = mixture_separator(feats)
    refs = feats.source_waves[:, :4096]
    got = sdr_sir_sar(*decompose(refs, est[0, :4096], 0, 4))[0]
    s, ei, ea = dense_oracle(refs, est[0, :4096], 0, 4)
    assert got == pytest.approx(ratio_db(s, ei + ea), abs=1e-6)


def test_empty_split(synth_manifest):
    with pytest.raises(MetricError):
        evaluate_manifest(synth_manifest, split="test", separator=lambda f: None)
    with pytest.raises(MetricError):
        evaluate_manifest(synth_manifest, split="train")
