"""Track manifests: chunking, silence detection, validation split, synthetic data."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from munet.audio import Waveform, load_audio, resample, write_audio

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SAMPLE_RATE = 10880
CHUNK_SECONDS = 6.0
SILENCE_RMS = 1e-4
MAX_LENGTH_MISMATCH = 256  # one STFT hop
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Bad or inconsistent input data."""


@dataclass(frozen=True)
class TrackEntry:
    track_id: str
    mixture_path: str
    stem_paths: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "stem_paths", tuple(str(p) for p in self.stem_paths))
        object.__setattr__(self, "mixture_path", str(self.mixture_path))
        if len(self.stem_paths) < 2:
            raise DataError(f"track {self.track_id}: need at least 2 stems")
        paths = (self.mixture_path,) + self.stem_paths
        if len(set(paths)) != len(paths):
            raise DataError(f"track {self.track_id}: mixture and stem paths must be distinct")
        if self.split not in SPLITS:
            raise DataError(f"track {self.track_id}: unknown split {self.split!r}")


@dataclass(frozen=True)
class SampleRecord:
    track_id: str
    chunk_index: int
    offset: int
    silent: tuple[bool, ...]
    split: str = "train"

    @property
    def any_silent(self) -> bool:
        return any(self.silent)


@dataclass
class Manifest:
    records: list[SampleRecord]
    source_names: list[str]
    sample_rate: int
    chunk_length: int
    tracks: dict[str, TrackEntry] = field(default_factory=dict)
    config_hash: str = ""
    base_dir: Path | None = None  # resolves relative paths; not serialised
    stats: dict = field(default_factory=dict)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def sorted(self) -> "Manifest":
        return replace(self, records=sorted(self.records, key=lambda r: (r.track_id, r.chunk_index)))

    # JSON ------------------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "config_hash": self.config_hash,
            "source_names": list(self.source_names),
            "sample_rate": self.sample_rate,
            "chunk_length": self.chunk_length,
            "tracks": {
                tid: {"mixture": e.mixture_path, "stems": list(e.stem_paths), "split": e.split}
                for tid, e in sorted(self.tracks.items())
            },
            "records": [
                {"track_id": r.track_id, "chunk_index": r.chunk_index, "offset": r.offset,
                 "silent": list(r.silent), "split": r.split}
                for r in self.records
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, base_dir: Path | None = None) -> "Manifest":
        doc = json.loads(text)
        if doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {doc.get('version')}")
        tracks = {
            tid: TrackEntry(tid, t["mixture"], tuple(t["stems"]), t.get("split", "train"))
            for tid, t in doc.get("tracks", {}).items()
        }
        records = [
            SampleRecord(r["track_id"], int(r["chunk_index"]), int(r["offset"]),
                         tuple(bool(s) for s in r["silent"]), r.get("split", "train"))
            for r in doc["records"]
        ]
        return cls(records, list(doc["source_names"]), int(doc["sample_rate"]), int(doc["chunk_length"]),
                   tracks, doc.get("config_hash", ""), base_dir)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        return cls.from_json(path.read_text(), base_dir=path.parent.resolve())


@dataclass
class PipelineConfig:
    source_names: list[str] = field(default_factory=lambda: ["vocals", "accompaniment"])
    sample_rate: int = SAMPLE_RATE
    chunk_seconds: float = CHUNK_SECONDS
    valid_fraction: float = 0.05
    seed: int = 0
    filter_silent: bool = True
    silence_threshold: float = SILENCE_RMS
    workers: int = 1

    @property
    def chunk_length(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    def digest(self) -> str:
        d = asdict(self)
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- audio access

def load_track(entry: TrackEntry, sample_rate: int, base_dir: Path | None = None) -> tuple[Waveform, list[Waveform]]:
    """Load mixture and stems as mono at ``sample_rate``, trimmed to a common length."""

    def _load(p: str) -> Waveform:
        path = Path(p)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return resample(load_audio(path), sample_rate)

    try:
        mix = _load(entry.mixture_path)
        stems = [_load(p) for p in entry.stem_paths]
    except (OSError, ValueError) as exc:
        raise DataError(f"track {entry.track_id}: {exc}") from exc
    lengths = [len(mix)] + [len(s) for s in stems]
    if max(lengths) - min(lengths) > MAX_LENGTH_MISMATCH:
        raise DataError(f"track {entry.track_id}: stem/mixture lengths differ by more than one hop: {lengths}")
    n = min(lengths)
    return Waveform(mix.samples[:n], sample_rate), [Waveform(s.samples[:n], sample_rate) for s in stems]


def detect_silent(chunk, threshold: float = SILENCE_RMS) -> bool:
    """True when the chunk's RMS is below ``threshold`` (full scale 1.0)."""
    x = chunk.samples if isinstance(chunk, Waveform) else np.asarray(chunk, dtype=np.float64)
    if x.size == 0:
        raise ValueError("detect_silent needs a non-empty chunk")
    return bool(np.sqrt(np.mean(np.square(x))) < threshold)


def chunk_track(entry: TrackEntry, chunk_seconds: float = CHUNK_SECONDS, sample_rate: int = SAMPLE_RATE,
                base_dir: Path | None = None, audio=None, threshold: float = SILENCE_RMS) -> list[SampleRecord]:
    """Split a track into non-overlapping chunks; a trailing partial chunk is dropped."""
    if chunk_seconds <= 0:
        raise ValueError("chunk_seconds must be positive")
    mix, stems = audio if audio is not None else load_track(entry, sample_rate, base_dir)
    chunk_length = int(round(chunk_seconds * sample_rate))
    records = []
    for idx in range(len(mix) // chunk_length):
        off = idx * chunk_length
        silent = tuple(detect_silent(s.samples[off : off + chunk_length], threshold) for s in stems)
        records.append(SampleRecord(entry.track_id, idx, off, silent, entry.split))
    return records


def split_validation(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Move ceil(fraction * N_train) pseudo-randomly chosen train records to ``valid``."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    train_idx = [i for i, r in enumerate(manifest.records) if r.split == "train"]
    n_valid = math.ceil(fraction * len(train_idx))
    chosen = set(np.random.default_rng(seed).permutation(len(train_idx))[:n_valid].tolist())
    moved = {train_idx[j] for j in chosen}
    records = [replace(r, split="valid") if i in moved else r for i, r in enumerate(manifest.records)]
    return replace(manifest, records=records, stats={**manifest.stats, "moved_to_valid": n_valid})


def filter_silent(manifest: Manifest) -> Manifest:
    """Drop train records in which any source is silent; other splits are untouched."""
    kept = [r for r in manifest.records if not (r.split == "train" and r.any_silent)]
    removed = len(manifest.records) - len(kept)
    log.info("silent-source filter removed %d train records", removed)
    return replace(manifest, records=kept, stats={**manifest.stats, "silent_removed": removed})


def build_manifest(entries: list[TrackEntry], config: PipelineConfig | None = None,
                   base_dir: Path | None = None) -> Manifest:
    """Resample, downmix, chunk, detect silence, split, filter - in that order."""
    config = config or PipelineConfig()
    entries = sorted(entries, key=lambda e: e.track_id)
    ids = [e.track_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate track ids")
    for e in entries:
        if len(e.stem_paths) != len(config.source_names):
            raise DataError(f"track {e.track_id}: {len(e.stem_paths)} stems for sources {config.source_names}")

    def work(entry: TrackEntry) -> list[SampleRecord]:
        return chunk_track(entry, config.chunk_seconds, config.sample_rate, base_dir,
                           threshold=config.silence_threshold)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            per_track = list(pool.map(work, entries))
    else:
        per_track = [work(e) for e in entries]
    records = [r for recs in per_track for r in recs]
    manifest = Manifest(records, list(config.source_names), config.sample_rate, config.chunk_length,
                        {e.track_id: e for e in entries}, config.digest(), base_dir).sorted()
    if manifest.split("train") and config.valid_fraction > 0:
        manifest = split_validation(manifest, config.valid_fraction, config.seed)
    if config.filter_silent:
        manifest = filter_silent(manifest)
    return manifest


def discover_tracks(root, source_names: list[str], split: str = "train") -> list[TrackEntry]:
    """Find ``<root>/<track_id>/{mixture.wav, <source>.wav}`` track folders."""
    root = Path(root)
    entries = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        mix = d / "mixture.wav"
        stems = [d / f"{s}.wav" for s in source_names]
        if mix.exists() and all(s.exists() for s in stems):
            entries.append(TrackEntry(d.name, str(mix), tuple(str(s) for s in stems), split))
    return entries


# ---------------------------------------------------------------- synthetic data

@dataclass
class SourceSpec:
    name: str
    archetype: str  # sine_bank | filtered_noise | am_pulses | chirp
    gain: float = 1.0
    low_hz: float = 100.0
    high_hz: float = 1000.0


@dataclass
class SyntheticConfig:
    sources: list[SourceSpec]
    n_tracks: int = 2
    duration: float = 12.0
    sample_rate: int = SAMPLE_RATE
    seed: int = 0
    splits: list[str] | None = None  # per track; default all "train"
    silent_chunks: dict[str, list[list[int]]] = field(default_factory=dict)
    # silent_chunks: {"<track index>": [[source index, chunk index], ...]} zeroes that stem over
    # one 6 s chunk, to build fixtures with silent sources.
    track_prefix: str = "track"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        d["sources"] = [SourceSpec(**s) for s in d["sources"]]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


ARCHETYPES = ("sine_bank", "filtered_noise", "am_pulses", "chirp")


def _synth_source(spec: SourceSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if spec.archetype == "sine_bank":
        # a few harmonic notes that change every 0.5-1.5 s
        out = np.zeros(n)
        pos = 0
        while pos < n:
            length = int(rng.uniform(0.5, 1.5) * sr)
            f0 = rng.uniform(spec.low_hz, spec.high_hz / 3)
            seg = np.arange(min(length, n - pos)) / sr
            env = np.minimum(1.0, np.minimum(seg, seg[::-1]) / 0.01 + 1e-3)
            note = sum(np.sin(2 * np.pi * f0 * h * seg + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
            out[pos : pos + len(seg)] = env * note
            pos += len(seg)
    elif spec.archetype == "filtered_noise":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sr)
        spectrum[(freqs < spec.low_hz) | (freqs > spec.high_hz)] = 0
        out = np.fft.irfft(spectrum, n)
    elif spec.archetype == "am_pulses":
        carrier = rng.standard_normal(n)
        spectrum = np.fft.rfft(carrier)
        freqs = np.fft.rfftfreq(n, 1 / sr)
        spectrum[(freqs < spec.low_hz) | (freqs > spec.high_hz)] = 0
        carrier = np.fft.irfft(spectrum, n)
        rate = rng.uniform(2.0, 4.0)
        env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 4
        out = carrier * env
    elif spec.archetype == "chirp":
        period = rng.uniform(1.0, 2.0)
        frac = (t % period) / period
        f = spec.low_hz * (spec.high_hz / spec.low_hz) ** frac
        phase = 2 * np.pi * np.cumsum(f) / sr
        out = np.sin(phase)
    else:
        raise ValueError(f"unknown archetype {spec.archetype!r}; expected one of {ARCHETYPES}")
    peak = np.max(np.abs(out))
    return out / peak * 0.3 if peak > 0 else out


def gen_synthetic(config: SyntheticConfig, out_dir) -> list[TrackEntry]:
    """Write ``<out_dir>/<track_id>/{mixture.wav, <source>.wav}``; the mixture is the stem sum."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"{out_dir} is not writable")
    sr = config.sample_rate
    n = int(round(config.duration * sr))
    chunk = int(round(CHUNK_SECONDS * sr))
    entries = []
    for ti in range(config.n_tracks):
        rng = np.random.default_rng([config.seed, ti])
        track_id = f"{config.track_prefix}{ti:03d}"
        stems = []
        for si, spec in enumerate(config.sources):
            x = spec.gain * _synth_source(spec, n, sr, rng)
            for src, ci in config.silent_chunks.get(str(ti), []):
                if src == si:
                    x[ci * chunk : (ci + 1) * chunk] = 0.0
            stems.append(x.astype(np.float32))
        mixture = np.sum([s.astype(np.float64) for s in stems], axis=0).astype(np.float32)
        tdir = out_dir / track_id
        stem_paths = []
        for spec, s in zip(config.sources, stems):
            p = tdir / f"{spec.name}.wav"
            write_audio(Waveform(s, sr), p)
            stem_paths.append(str(p))
        write_audio(Waveform(mixture, sr), tdir / "mixture.wav")
        split = config.splits[ti] if config.splits else "train"
        entries.append(TrackEntry(track_id, str(tdir / "mixture.wav"), tuple(stem_paths), split))
    (out_dir / "synthetic.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return entries


def relative_entries(entries: list[TrackEntry], base_dir) -> list[TrackEntry]:
    """Rewrite paths relative to ``base_dir`` so manifests are location-independent."""
    base = Path(base_dir).resolve()

    def rel(p: str) -> str:
        return os.path.relpath(Path(p).resolve(), base)

    return [TrackEntry(e.track_id, rel(e.mixture_path), tuple(rel(p) for p in e.stem_paths), e.split) for e in entries]
