"""Multi-source U-Net spectrogram masking for music source separation.

One network predicts a soft mask per source in a single forward pass; the
per-source losses are combined with a configurable weighting strategy.
"""
from munet.audio import ComplexSpectrogram, MagnitudeSpectrogram, Waveform, istft, load_audio, resample, stft, write_audio
from munet.dataset import Manifest, PipelineConfig, SyntheticConfig, build_manifest, gen_synthetic
from munet.kernels import backend
from munet.losses import WeightState, direct_loss, indirect_loss, total_loss
from munet.masking import apply_mask, compute_iam, reconstruct
from munet.metrics import bss_eval, decompose, sdr_sir_sar
from munet.network import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from munet.trainer import TrainConfig, fit, train_epoch, validate

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram", "MagnitudeSpectrogram", "Waveform", "istft", "load_audio", "resample", "stft",
    "write_audio", "Manifest", "PipelineConfig", "SyntheticConfig", "build_manifest", "gen_synthetic", "backend",
    "WeightState", "direct_loss", "indirect_loss", "total_loss", "apply_mask", "compute_iam", "reconstruct",
    "bss_eval", "decompose", "sdr_sir_sar", "NetworkConfig", "build_network", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "fit", "train_epoch", "validate",
]
