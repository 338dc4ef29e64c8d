import csv
import json

import numpy as np
import pytest

from munet.cli import DEFAULTS, build_parser, main, parse_sources, resolve_config
from munet.dataset import Manifest
from munet.network import ConfigError

SOURCES = "tone:sine_bank:1.0:100:1000,noise:filtered_noise:1.0:1500:4500"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(root / "data"), "--tracks", "2", "--test-tracks", "1",
                 "--sources", SOURCES, "--seed", "3"]) == 0
    assert main(["preprocess", "--data", str(root / "data/train"), "--test-data", str(root / "data/test"),
                 "--out", str(root / "prep"), "--valid-fraction", "0.25"]) == 0
    assert main(["train", "--manifest", str(root / "prep/manifest.json"), "--out", str(root / "run"),
                 "--epochs", "2", "--batch-size", "2"]) == 0
    return root


def test_pipeline_outputs(pipeline):
    m = Manifest.load(pipeline / "prep/manifest.json")
    assert m.source_names == ["tone", "noise"]
    assert len(m.split("test")) == 2 and len(m.split("valid")) == 1
    assert (pipeline / "run/best.munet").exists() and (pipeline / "run/train_log.jsonl").exists()
    cfg = json.loads((pipeline / "run/train_config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["command"] == "train"


def test_evaluate_checkpoint(pipeline):
    out = pipeline / "eval"
    assert main(["evaluate", "--manifest", str(pipeline / "prep/manifest.json"),
                 "--checkpoint", str(pipeline / "run/best.munet"), "--out", str(out), "--filter-length", "32"]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 4 and {r["source"] for r in rows} == {"tone", "noise"}
    assert set(json.loads((out / "summary.json").read_text())["sources"]) == {"tone", "noise"}


def test_evaluate_oracle_beats_mixture(pipeline):
    docs = {}
    for o in ("iam", "mixture"):
        out = pipeline / f"eval_{o}"
        assert main(["evaluate", "--manifest", str(pipeline / "prep/manifest.json"), "--oracle", o,
                     "--out", str(out), "--filter-length", "32"]) == 0
        docs[o] = json.loads((out / "summary.json").read_text())
    for s in ("tone", "noise"):
        assert docs["iam"]["sources"][s]["SDR"]["mean"] > 20
        assert docs["iam"]["sources"][s]["SDR"]["mean"] > docs["mixture"]["sources"][s]["SDR"]["mean"]


def test_separate(pipeline):
    mix = next((pipeline / "data/test").glob("*/mixture.wav"))
    out = pipeline / "sep"
    assert main(["separate", "--checkpoint", str(pipeline / "run/best.munet"), "--input", str(mix),
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.wav")) == ["noise.wav", "tone.wav"]


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 5, "train": {"epochs": 7, "batch_size": 3}, "bench": {"duration": 1}}))
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--epochs", "9", "--out", "x"])
    cfg = resolve_config(args)
    assert cfg["epochs"] == 9  # flag beats file
    assert cfg["batch_size"] == 3  # file beats default
    assert cfg["seed"] == 5
    assert cfg["learning_rate"] == DEFAULTS["train"]["learning_rate"]


def test_global_flag_before_or_after_subcommand():
    a = resolve_config(build_parser().parse_args(["--seed", "4", "bench"]))
    b = resolve_config(build_parser().parse_args(["bench", "--seed", "4"]))
    assert a["seed"] == b["seed"] == 4


def test_unknown_config_key(tmp_path, capsys):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 2
    assert "epochz" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train", "--epochs", "0", "--manifest", "nope.json"],
    ["train", "--manifest", "nope.json", "--filters", "4,x"],
    ["gen-synth", "--sources", "a:warble"],
    ["bench", "--preset", "huge"],
    ["evaluate"],
])
def test_config_errors_exit_2(tmp_path, argv):
    with pytest.raises(SystemExit) as exc:
        code = main(argv + ["--out", str(tmp_path / "o")])
        raise SystemExit(code)
    assert exc.value.code == 2


def test_bad_config_file_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["bench", "--config", str(p)]) == 2


def test_data_errors_exit_3(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "empty").mkdir()
    assert main(["preprocess", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "p")]) == 3
    mix = tmp_path / "bad.wav"
    mix.write_bytes(b"RIFF0000WAVEjunk")
    assert main(["separate", "--checkpoint", str(tmp_path / "none.munet"), "--input", str(mix),
                 "--out", str(tmp_path / "s")]) in (2, 3)


def test_empty_split_exit_3(pipeline, tmp_path):
    assert main(["evaluate", "--manifest", str(pipeline / "prep/manifest.json"), "--oracle", "iam",
                 "--split", "nothing", "--out", str(tmp_path)]) == 3


def test_source_count_mismatch_exit_2(pipeline, tmp_path):
    from munet.network import NetworkConfig, build_network, save_checkpoint

    p = tmp_path / "k3.munet"
    save_checkpoint(build_network(NetworkConfig.preset("toy", out_channels=3)), p)
    assert main(["evaluate", "--manifest", str(pipeline / "prep/manifest.json"), "--checkpoint", str(p),
                 "--out", str(tmp_path / "e")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exit_4(pipeline, tmp_path, capsys):
    out = tmp_path / "nan"
    code = main(["train", "--manifest", str(pipeline / "prep/manifest.json"), "--out", str(out),
                 "--epochs", "3", "--lr", "1e12"])
    assert code == 4
    assert "non-finite" in capsys.readouterr().err
    assert (out / "train_log.jsonl").exists()


def test_energy_report_gain_ratio(tmp_path):
    # same archetype and band; the second stem at half amplitude carries about a quarter of the energy
    src = "a:filtered_noise:1.0:200:2000,b:filtered_noise:0.5:200:2000"
    assert main(["gen-synth", "--out", str(tmp_path / "d"), "--tracks", "2", "--test-tracks", "0",
                 "--sources", src]) == 0
    assert main(["preprocess", "--data", str(tmp_path / "d/train"), "--sources", "a,b", "--valid-fraction", "0",
                 "--out", str(tmp_path / "p")]) == 0
    assert main(["energy-report", "--manifest", str(tmp_path / "p/manifest.json"), "--out", str(tmp_path / "e")]) == 0
    doc = json.loads((tmp_path / "e/energy.json").read_text())
    ea, eb = doc["energies"]
    assert ea / eb == pytest.approx(4.0, rel=0.1)
    p1 = doc["weights"]["EBW_P1"]
    assert p1[0] == 1.0 and p1[1] == pytest.approx(4.0, rel=0.1)
    np.testing.assert_allclose(doc["weights"]["EBW_P2"], np.square(p1), rtol=1e-12)
    assert sum(doc["weights"]["OH"]) == pytest.approx(1.0, abs=1e-12)
    rows = list(csv.DictReader(open(tmp_path / "e/energy.csv")))
    assert [r["source"] for r in rows] == ["a", "b"]
    assert float(rows[1]["EBW_P1"]) == p1[1]


@pytest.mark.parametrize("k", [2, 4])
def test_bench_forward_calls_equal_batches(tmp_path, k):
    out = tmp_path / f"b{k}"
    assert main(["bench", "--sources", str(k), "--duration", "0.3", "--batch-size", "1", "--out", str(out)]) == 0
    res = json.loads((out / "bench.json").read_text())
    assert res["forward_calls"] == res["batches"] and res["sources_per_forward"] == k


def test_parse_sources():
    specs = parse_sources("x:sine_bank,y:filtered_noise:0.5:10:20")
    assert specs[0].name == "x" and specs[1].gain == 0.5 and (specs[1].low_hz, specs[1].high_hz) == (10.0, 20.0)
    with pytest.raises(ConfigError):
        parse_sources("x")

