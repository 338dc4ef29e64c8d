"""Command-line entry point: ``munet <subcommand> [options]``.

Every option can also come from ``--config file.json``: a flat object of
option names (``batch_size``, ``strategy``, ...), optionally nested under the
subcommand name. Flags given on the command line win over the file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from munet import losses as L
from munet.audio import AudioError
from munet.dataset import (ARCHETYPES, SAMPLE_RATE, DataError, Manifest, PipelineConfig, SourceSpec,
                           SyntheticConfig, build_manifest, discover_tracks, gen_synthetic, relative_entries)
from munet.metrics import MetricError
from munet.network import CheckpointError, ConfigError, NetworkConfig, build_network

log = logging.getLogger("munet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_SOURCES = "tone:sine_bank:1.0:100:1000,noise:filtered_noise:1.0:1500:4500"


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text) -> list[int]:
    items = text if isinstance(text, (list, tuple)) else _csv_list(text)
    try:
        return [int(v) for v in items]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def parse_sources(text) -> list[SourceSpec]:
    """``name:archetype[:gain[:low_hz:high_hz]]`` entries, comma separated."""
    if isinstance(text, list):
        return [SourceSpec(**s) if isinstance(s, dict) else parse_sources(s)[0] for s in text]
    specs = []
    for item in _csv_list(text):
        parts = item.split(":")
        if len(parts) not in (2, 3, 5):
            raise ConfigError(f"bad source spec {item!r}; expected name:archetype[:gain[:low:high]]")
        if parts[1] not in ARCHETYPES:
            raise ConfigError(f"unknown archetype {parts[1]!r} in {item!r}; expected one of {ARCHETYPES}")
        kw = {"name": parts[0], "archetype": parts[1]}
        try:
            if len(parts) >= 3:
                kw["gain"] = float(parts[2])
            if len(parts) == 5:
                kw["low_hz"], kw["high_hz"] = float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise ConfigError(f"bad number in source spec {item!r}") from exc
        specs.append(SourceSpec(**kw))
    return specs


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subparser from resetting globals given before the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="JSON file of option values (flags override it)")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")

    p = argparse.ArgumentParser(prog="munet", description="Multi-source U-Net spectrogram-mask separation.",
                                parents=[common], argument_default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common], argument_default=argparse.SUPPRESS)

    g = add("gen-synth", "write a synthetic multi-source dataset")
    g.add_argument("--sources", help=f"name:archetype[:gain[:low:high]],... (default {DEFAULT_SOURCES})")
    g.add_argument("--tracks", type=int, help="number of train tracks (default 4)")
    g.add_argument("--test-tracks", type=int, help="number of test tracks (default 1)")
    g.add_argument("--duration", type=float, help="track length in seconds (default 12)")
    g.add_argument("--silent", help="track:source:chunk,... stems to zero over one chunk")

    pp = add("preprocess", "chunk a dataset and write manifest.json")
    pp.add_argument("--data", type=Path, help="directory of <track>/{mixture,<source>}.wav train folders")
    pp.add_argument("--test-data", type=Path, help="directory of test track folders")
    pp.add_argument("--sources", help="comma-separated source names, in network output order")
    pp.add_argument("--valid-fraction", type=float, help="share of train chunks held out (default 0.05)")
    pp.add_argument("--no-filter-silent", dest="filter_silent", action="store_false",
                    help="keep train chunks with a silent source")
    pp.add_argument("--workers", type=int, help="decode threads (default 1)")

    t = add("train", "train a network on a manifest")
    t.add_argument("--manifest", type=Path)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    t.add_argument("--loss-kind", choices=("direct", "indirect"))
    t.add_argument("--strategy", choices=L.STRATEGIES)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--mask-ceiling", type=float)
    t.add_argument("--no-filter-silent", dest="filter_silent", action="store_false")
    t.add_argument("--temperature", type=float, help="DWA softmax temperature (default 2)")
    t.add_argument("--preset", choices=("toy", "full"), help="filter preset (default toy)")
    t.add_argument("--filters", help="comma-separated channel counts f0..fD, overrides --preset")
    t.add_argument("--dropout-rate", type=float)

    s = add("separate", "separate a WAV file into one WAV per source")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--input", type=Path)

    e = add("evaluate", "SDR/SIR/SAR over a manifest split")
    e.add_argument("--manifest", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--oracle", choices=("iam", "mixture"), help="score ideal masks or the raw mixture instead")
    e.add_argument("--split", help="manifest split to score (default test)")
    e.add_argument("--filter-length", type=int, help="projection filter taps (default 512)")

    r = add("energy-report", "per-source energies and the weights of every strategy")
    r.add_argument("--manifest", type=Path)
    r.add_argument("--split", help="split to measure (default train)")

    b = add("bench", "inference throughput")
    b.add_argument("--checkpoint", type=Path, help="default: a freshly initialised network")
    b.add_argument("--batch-size", type=int)
    b.add_argument("--duration", type=float, help="seconds to run (default 5)")
    b.add_argument("--preset", choices=("toy", "full"))
    b.add_argument("--sources", type=int, help="output channels of the fresh network (default 2)")
    return p


DEFAULTS = {
    "gen-synth": {"sources": DEFAULT_SOURCES, "tracks": 4, "test_tracks": 1, "duration": 12.0, "silent": ""},
    "preprocess": {"data": None, "test_data": None, "sources": "tone,noise", "valid_fraction": 0.05,
                   "filter_silent": True, "workers": 1},
    "train": {"manifest": None, "epochs": 10, "batch_size": 8, "learning_rate": 0.01, "loss_kind": "indirect",
              "strategy": "UW", "checkpoint_every": 10, "mask_ceiling": 10.0, "filter_silent": True,
              "temperature": 2.0, "preset": "toy", "filters": None, "dropout_rate": 0.1},
    "separate": {"checkpoint": None, "input": None},
    "evaluate": {"manifest": None, "checkpoint": None, "oracle": None, "split": "test", "filter_length": 512},
    "energy-report": {"manifest": None, "split": "train"},
    "bench": {"checkpoint": None, "batch_size": 8, "duration": 5.0, "preset": "toy", "sources": 2},
}
GLOBAL_DEFAULTS = {"seed": 0, "out": None}
PATH_KEYS = {"data", "test_data", "manifest", "checkpoint", "input", "out"}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    allowed = {**GLOBAL_DEFAULTS, **DEFAULTS[cmd]}
    resolved = dict(allowed)
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {cfg_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        section = doc.pop(cmd, {})
        doc = {k: v for k, v in doc.items() if k not in DEFAULTS}  # other subcommands' sections
        doc.update(section)
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown {cmd} config keys: {unknown}")
        resolved.update(doc)
    for key, value in vars(args).items():
        if key in allowed:
            resolved[key] = value
    for key in PATH_KEYS & set(resolved):
        if resolved[key] is not None:
            resolved[key] = Path(resolved[key])
    return resolved


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(cfg: dict) -> Path:
    _require(cfg, "out")
    cfg["out"].mkdir(parents=True, exist_ok=True)
    return cfg["out"]


def _echo(cmd: str, cfg: dict, out: Path | None) -> None:
    blob = json.dumps({"command": cmd, **{k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}},
                      sort_keys=True)
    print(f"resolved config: {blob}")
    if out is not None:
        (out / f"{cmd}_config.json").write_text(json.dumps(json.loads(blob), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_synth(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo("gen-synth", cfg, out)
    sources = parse_sources(cfg["sources"])
    silent: dict[str, list[list[int]]] = {}
    items = _csv_list(cfg["silent"]) if isinstance(cfg["silent"], str) else cfg["silent"]
    for item in items:
        parts = _int_list(item.split(":") if isinstance(item, str) else item)
        if len(parts) != 3:
            raise ConfigError(f"bad silent entry {item!r}; expected track:source:chunk")
        silent.setdefault(str(parts[0]), []).append(parts[1:])
    train = SyntheticConfig(sources, cfg["tracks"], cfg["duration"], SAMPLE_RATE, cfg["seed"], silent_chunks=silent)
    entries = gen_synthetic(train, out / "train")
    if cfg["test_tracks"] > 0:
        test = SyntheticConfig(sources, cfg["test_tracks"], cfg["duration"], SAMPLE_RATE, cfg["seed"] + 1_000_003,
                               track_prefix="test")
        entries += gen_synthetic(test, out / "test")
    print(f"wrote {len(entries)} tracks of {len(sources)} sources to {out}")
    return EXIT_OK


def cmd_preprocess(cfg: dict) -> int:
    _require(cfg, "data")
    out = _out_dir(cfg)
    _echo("preprocess", cfg, out)
    names = _csv_list(cfg["sources"]) if isinstance(cfg["sources"], str) else list(cfg["sources"])
    entries = discover_tracks(cfg["data"], names, "train")
    if cfg["test_data"] is not None:
        entries += discover_tracks(cfg["test_data"], names, "test")
    if not entries:
        raise DataError(f"no track folders with mixture.wav and {names} found under {cfg['data']}")
    pcfg = PipelineConfig(source_names=names, valid_fraction=cfg["valid_fraction"], seed=cfg["seed"],
                          filter_silent=cfg["filter_silent"], workers=cfg["workers"])
    manifest = build_manifest(relative_entries(entries, out), pcfg, base_dir=out.resolve())
    manifest.save(out / "manifest.json")
    counts = {s: len(manifest.split(s)) for s in ("train", "valid", "test")}
    print(f"manifest: {counts} records, stats {manifest.stats} -> {out / 'manifest.json'}")
    return EXIT_OK


def _load_manifest(cfg: dict) -> Manifest:
    _require(cfg, "manifest")
    try:
        return Manifest.load(cfg["manifest"])
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc


def cmd_train(cfg: dict) -> int:
    from munet.trainer import TrainConfig, fit

    out = _out_dir(cfg)
    _echo("train", cfg, out)
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
                       loss_kind=cfg["loss_kind"], strategy=cfg["strategy"], seed=cfg["seed"],
                       checkpoint_every=cfg["checkpoint_every"], mask_ceiling=cfg["mask_ceiling"],
                       filter_silent=cfg["filter_silent"], temperature=cfg["temperature"])
    filters = None if cfg["filters"] is None else tuple(_int_list(cfg["filters"]))
    manifest = _load_manifest(cfg)
    overrides = {"out_channels": len(manifest.source_names), "mask_ceiling": cfg["mask_ceiling"],
                 "dropout_rate": cfg["dropout_rate"], "seed": cfg["seed"]}
    if filters is not None:
        ncfg = NetworkConfig(filters=filters, **overrides)
    else:
        ncfg = NetworkConfig.preset(cfg["preset"], **overrides)
    net = build_network(ncfg)
    log.info("network: %d parameters", net.num_parameters())
    reports, best = fit(net, manifest, tcfg, out)
    first, last = reports[0], reports[-1]
    print(f"trained {len(reports)} epochs: weighted loss {first.weighted_total:.5f} -> {last.weighted_total:.5f}; "
          f"best checkpoint {best}")
    return EXIT_OK


def cmd_separate(cfg: dict) -> int:
    from munet.inference import separate_track

    _require(cfg, "checkpoint", "input")
    out = _out_dir(cfg)
    _echo("separate", cfg, out)
    paths = separate_track(cfg["checkpoint"], cfg["input"], out)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    from munet.inference import mixture_separator, oracle_separator
    from munet.metrics import evaluate_manifest

    out = _out_dir(cfg)
    _echo("evaluate", cfg, out)
    manifest = _load_manifest(cfg)
    separator = {"iam": oracle_separator, "mixture": mixture_separator, None: None}[cfg["oracle"]]
    if separator is None:
        _require(cfg, "checkpoint")
    report = evaluate_manifest(manifest, cfg["checkpoint"], cfg["filter_length"], out, cfg["split"], separator)
    for name, m in report.sources.items():
        print(f"{name:>16s}  SDR {m['SDR']['median']:7.2f}  SIR {m['SIR']['median']:7.2f}  "
              f"SAR {m['SAR']['median']:7.2f}  (medians)")
    print(f"{'overall':>16s}  SDR {report.overall['SDR']['median']:7.2f}  "
          f"({report.evaluated_chunks} chunks, {report.skipped_chunks} skipped)")
    return EXIT_OK


def energy_report(manifest: Manifest, out, split: str = "train"):
    """Per-source energies over ``split`` and every strategy's weights -> CSV and JSON."""
    from munet.features import SampleLoader
    from munet.trainer import global_energies

    records = manifest.split(split)
    if not records:
        raise DataError(f"the {split} split is empty")
    k = len(manifest.source_names)
    energies = global_energies(SampleLoader(manifest, cache=False), records, k)
    if min(energies) <= 0:
        raise DataError(f"a source has zero energy over the {split} split: {energies}")
    stats = L.EnergyStats(energies, len(records), list(manifest.source_names))
    table = L.strategy_weight_table(energies)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "energy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "energy"] + list(L.STRATEGIES))
        for i, name in enumerate(stats.names):
            w.writerow([name, repr(energies[i])] + [repr(table[s][i]) for s in L.STRATEGIES])
    doc = {"split": split, "sample_count": stats.sample_count, "sources": stats.names,
           "energies": energies, "weights": table}
    (out / "energy.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return stats, table


def cmd_energy_report(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo("energy-report", cfg, out)
    stats, table = energy_report(_load_manifest(cfg), out, cfg["split"])
    for i, name in enumerate(stats.names):
        weights = "  ".join(f"{s}={table[s][i]:.4f}" for s in L.STRATEGIES)
        print(f"{name:>16s}  E={stats.per_source_energy[i]:.6g}  {weights}")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    from munet.inference import bench_inference

    out = cfg["out"]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    _echo("bench", cfg, out)
    if cfg["checkpoint"] is not None:
        target = cfg["checkpoint"]
    else:
        target = build_network(NetworkConfig.preset(cfg["preset"], out_channels=cfg["sources"], seed=cfg["seed"]))
    res = bench_inference(target, cfg["batch_size"], cfg["duration"], cfg["seed"])
    print(f"{res['chunks_per_second_mean']:.2f} +/- {res['chunks_per_second_std']:.2f} chunks/s "
          f"(batch {res['batch_size']}, {res['batches']} batches, {res['forward_calls']} forward calls, "
          f"{res['sources_per_forward']} sources per forward)")
    if out is not None:
        (out / "bench.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "energy-report": cmd_energy_report,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    from munet.trainer import NumericError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AudioError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
