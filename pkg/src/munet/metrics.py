"""Source separation metrics: SDR, SIR and SAR from a least-squares decomposition.

The estimate is split into a filtered version of the target reference, an
interference term (what the other references explain on top of that) and an
artifact residual. Projections use FIR filters of ``filter_length`` taps; the
estimate is zero padded by ``filter_length - 1`` samples so that the Gram
matrices are exactly block Toeplitz.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

log = logging.getLogger(__name__)

DEFAULT_FILTER_LENGTH = 512
REGULARIZATION = 1e-10
# squared Cholesky-diagonal ratio below this marks a rank-deficient Gram matrix
RANK_TOLERANCE = 1e-12
# energies this far below the estimate's energy count as exactly zero; the
# regularised solve leaves residue near 1e-20, so ratios above 150 dB read as +inf
ZERO_ENERGY = 1e-15
METRICS = ("SDR", "SIR", "SAR")


class MetricError(ValueError):
    pass


@dataclass
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    rank_deficient: bool = False

    def __iter__(self):
        return iter((self.s_target, self.e_interf, self.e_artif))


def _xcorr(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """c[lag] = sum_n a[n] * b[n + lag] for lag in [-max_lag, max_lag]."""
    full = fftconvolve(b, a[::-1])  # index len(a)-1 is lag 0
    mid = len(a) - 1
    lo, hi = mid - max_lag, mid + max_lag + 1
    out = np.zeros(2 * max_lag + 1)
    src_lo, src_hi = max(lo, 0), min(hi, len(full))
    out[src_lo - lo : src_hi - lo] = full[src_lo:src_hi]
    return out


def _solve(G: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve the (lightly regularized) Gram system; flag it when G itself is near-singular."""
    try:
        diag = np.diag(scipy.linalg.cholesky(G, lower=True))
        deficient = (diag.min() / diag.max()) ** 2 < RANK_TOLERANCE
    except np.linalg.LinAlgError:
        deficient = True
    scale = np.trace(G) / G.shape[0]
    Greg = G + REGULARIZATION * scale * np.eye(G.shape[0])
    if deficient:
        log.warning("rank-deficient Gram system; using regularized least-squares solution")
        return scipy.linalg.lstsq(Greg, d)[0], True
    return scipy.linalg.solve(Greg, d, assume_a="pos"), False


def decompose(references, estimate, target_index: int, filter_length: int = DEFAULT_FILTER_LENGTH) -> Decomposition:
    """Split ``estimate`` into target, interference and artifact components.

    ``references`` is (K, N), ``estimate`` is (N,). The returned components
    have length N + filter_length - 1 and sum to the zero-padded estimate.
    """
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    est = np.asarray(estimate, dtype=np.float64)
    K, N = refs.shape
    L = int(filter_length)
    if L < 1:
        raise MetricError("filter_length must be >= 1")
    if est.shape != (N,):
        raise MetricError(f"estimate length {est.shape} does not match references ({N})")
    if not 0 <= target_index < K:
        raise MetricError(f"target_index {target_index} out of range for {K} references")
    energies = np.sum(refs**2, axis=1)
    if np.any(energies == 0):
        raise MetricError("silent reference: projection is undefined")

    M = N + L - 1
    est_pad = np.concatenate([est, np.zeros(L - 1)])

    # block Toeplitz Gram: G[(i,a),(j,b)] = sum_n r_i[n-a] r_j[n-b] = xcorr_ij(a-b)
    G = np.zeros((K * L, K * L))
    for i in range(K):
        for j in range(i, K):
            c = _xcorr(refs[j], refs[i], L - 1)  # c[lag] = sum_n r_j[n] r_i[n+lag]
            block = scipy.linalg.toeplitz(c[L - 1 :: -1], c[L - 1 :])
            G[i * L : (i + 1) * L, j * L : (j + 1) * L] = block
            G[j * L : (j + 1) * L, i * L : (i + 1) * L] = block.T
    # D[(i,a)] = sum_n r_i[n-a] e[n]
    D = np.concatenate([_xcorr(refs[i], est, L - 1)[L - 1 :] for i in range(K)])

    t = target_index
    sl = slice(t * L, (t + 1) * L)
    c_target, flag_t = _solve(G[sl, sl], D[sl])
    s_target = fftconvolve(c_target, refs[t])[:M]
    c_all, flag_all = _solve(G, D)
    p_all = np.zeros(M)
    for i in range(K):
        p_all += fftconvolve(c_all[i * L : (i + 1) * L], refs[i])[:M]
    e_interf = p_all - s_target
    e_artif = est_pad - s_target - e_interf
    return Decomposition(s_target, e_interf, e_artif, flag_t or flag_all)


def _db(num: float, den: float) -> float:
    if den == 0:
        return math.inf
    if num == 0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def sdr_sir_sar(s_target, e_interf, e_artif) -> tuple[float, float, float]:
    """Energy ratios in dB; a zero denominator gives ``math.inf``."""
    s, ei, ea = (np.asarray(v, dtype=np.float64) for v in (s_target, e_interf, e_artif))
    if not (s.shape == ei.shape == ea.shape):
        raise MetricError("decomposition components differ in length")
    total = float(np.sum((s + ei + ea) ** 2))
    floor = ZERO_ENERGY * total

    def energy(v):
        e = float(np.sum(v**2))
        return 0.0 if e <= floor else e

    es, ei_e, ea_e = energy(s), energy(ei), energy(ea)
    e_dist = energy(ei + ea)
    if es == 0 and e_dist == 0:
        raise MetricError("undefined metrics: zero target and zero residual")
    sdr = _db(es, e_dist)
    sir = _db(es, ei_e)
    sar = _db(energy(s + ei), ea_e)
    return sdr, sir, sar


def bss_eval(references, estimates, filter_length: int = DEFAULT_FILTER_LENGTH) -> np.ndarray:
    """(K, 3) array of SDR, SIR, SAR for estimate i against reference i."""
    refs = np.atleast_2d(references)
    ests = np.atleast_2d(estimates)
    return np.array([sdr_sir_sar(*decompose(refs, ests[i], i, filter_length)) for i in range(refs.shape[0])])


# ---------------------------------------------------------------- aggregation

@dataclass
class EvalResult:
    track_id: str
    chunk_index: int
    source: str
    sdr: float
    sir: float
    sar: float
    filter_length: int


@dataclass
class EvalReport:
    sources: dict[str, dict[str, dict[str, float]]]
    overall: dict[str, dict[str, float]]
    evaluated_chunks: int
    skipped_chunks: int
    filter_length: int
    infinite_counts: dict[str, int] = field(default_factory=dict)
    results: list[EvalResult] = field(default_factory=list, repr=False)  # per (chunk, source) rows

    def to_dict(self) -> dict:
        return {
            "sources": self.sources,
            "overall": self.overall,
            "evaluated_chunks": self.evaluated_chunks,
            "skipped_chunks": self.skipped_chunks,
            "filter_length": self.filter_length,
            "infinite_counts": self.infinite_counts,
        }


def _stats(values: list[float]) -> dict[str, float]:
    finite = np.array([v for v in values if math.isfinite(v)], dtype=np.float64)
    if finite.size == 0:
        return {"mean": math.nan, "std": math.nan, "median": math.nan, "count": 0}
    return {"mean": float(np.mean(finite)), "std": float(np.std(finite)),
            "median": float(np.median(finite)), "count": int(finite.size)}


def aggregate(results: list[EvalResult], source_names: list[str], skipped: int = 0,
              filter_length: int = DEFAULT_FILTER_LENGTH) -> EvalReport:
    """Mean, std and median per source and pooled over all (source, chunk) pairs."""
    results = sorted(results, key=lambda r: (r.track_id, r.chunk_index, source_names.index(r.source)))
    per_source = {}
    for name in source_names:
        rows = [r for r in results if r.source == name]
        per_source[name] = {m: _stats([getattr(r, m.lower()) for r in rows]) for m in METRICS}
    overall = {m: _stats([getattr(r, m.lower()) for r in results]) for m in METRICS}
    inf_counts = {m: sum(1 for r in results if not math.isfinite(getattr(r, m.lower()))) for m in METRICS}
    chunks = len({(r.track_id, r.chunk_index) for r in results})
    return EvalReport(per_source, overall, chunks, skipped, filter_length, inf_counts, results)


def write_results(results: list[EvalResult], report: EvalReport, out) -> tuple[Path, Path]:
    """Per-chunk CSV plus summary JSON; ``out`` is a path prefix or directory."""
    out = Path(out)
    if out.suffix:
        csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    else:
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / "metrics.csv", out / "summary.json"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_id", "chunk_index", "source", "SDR", "SIR", "SAR"])
        for r in results:
            w.writerow([r.track_id, r.chunk_index, r.source, f"{r.sdr:.6f}", f"{r.sir:.6f}", f"{r.sar:.6f}"])
    json_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def evaluate_manifest(manifest, checkpoint=None, filter_length: int = DEFAULT_FILTER_LENGTH, out=None,
                      split: str = "test", separator=None) -> EvalReport:
    """Separate every chunk of ``split`` and score it against the reference stems.

    Pass either a ``checkpoint`` (path or Network) or a ``separator`` callable
    mapping :class:`~munet.features.ChunkFeatures` to (K, n) estimates, e.g.
    an oracle-mask separator. Chunks with a silent reference are skipped.
    """
    from munet.features import SampleLoader
    from munet.inference import network_separator

    records = sorted(manifest.split(split), key=lambda r: (r.track_id, r.chunk_index))
    if not records:
        raise MetricError(f"no {split} records to evaluate")
    if separator is None:
        if checkpoint is None:
            raise MetricError("evaluate_manifest needs a checkpoint or a separator")
        separator = network_separator(checkpoint, expect_sources=len(manifest.source_names))
    loader = SampleLoader(manifest, cache=False)
    results, skipped = [], 0
    for rec in records:
        feats = loader.features(rec)
        if np.any(np.sum(feats.source_waves**2, axis=1) == 0):
            skipped += 1
            continue
        estimates = separator(feats)
        for i, name in enumerate(manifest.source_names):
            sdr, sir, sar = sdr_sir_sar(*decompose(feats.source_waves, estimates[i], i, filter_length))
            results.append(EvalResult(rec.track_id, rec.chunk_index, name, sdr, sir, sar, filter_length))
    if not results:
        raise MetricError("no evaluable chunks (all references silent)")
    report = aggregate(results, list(manifest.source_names), skipped, filter_length)
    if out is not None:
        write_results(results, report, out)
    return report
