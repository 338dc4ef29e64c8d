import numpy as np
import pytest
from hypothesis import settings

from munet.dataset import PipelineConfig, SourceSpec, SyntheticConfig, build_manifest, gen_synthetic

settings.register_profile("munet", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("munet")

TONE_NOISE = [
    SourceSpec("tone", "sine_bank", 1.0, 100.0, 1000.0),
    SourceSpec("noise", "filtered_noise", 1.0, 1500.0, 4500.0),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_entries(tmp_path_factory):
    """Two 12 s tone+noise tracks (4 chunks)."""
    out = tmp_path_factory.mktemp("synth")
    return gen_synthetic(SyntheticConfig(TONE_NOISE, n_tracks=2, duration=12.0, seed=7), out)


@pytest.fixture(scope="session")
def synth_manifest(synth_entries):
    return build_manifest(synth_entries, PipelineConfig(source_names=["tone", "noise"], valid_fraction=0.25))
