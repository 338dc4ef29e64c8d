"""Multi-channel U-Net: one network, K mask outputs.

Layout for ``filters = [f0, f1, ..., fD]`` and depth ``D``:

* encoder level i (1..D): 4x4 stride-2 conv to ``f_i`` channels,
  leaky-ReLU(0.2), dropout;
* transition: 3x3 stride-1 conv, ``f_D -> f_D``;
* decoder level i (D..1): 4x4 stride-2 transposed conv to ``f_{i-1}``
  channels, ReLU, then concatenation with the encoder activation of the
  same resolution (levels 2..D only; level 1 is back at input resolution);
* head: 1x1 conv to K channels, sigmoid scaled by ``mask_ceiling``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from munet import autodiff as ad
from munet.autodiff import Tensor

TOY_FILTERS = (4, 8, 16, 24, 32, 48, 64)
FULL_FILTERS = (32, 64, 128, 256, 512, 1024, 2048)

CHECKPOINT_MAGIC = b"MUNET"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkConfig:
    filters: tuple[int, ...] = TOY_FILTERS
    depth: int = 6
    in_channels: int = 1
    out_channels: int = 2
    dropout_rate: float = 0.1
    mask_ceiling: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.depth != len(self.filters) - 1:
            raise ConfigError(f"depth {self.depth} needs {self.depth + 1} filter widths, got {len(self.filters)}")
        if self.out_channels < 1:
            raise ConfigError("out_channels must be >= 1")
        if self.in_channels != 1:
            raise ConfigError("only single-channel (log-magnitude) input is supported")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.mask_ceiling <= 0:
            raise ConfigError("mask_ceiling must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkConfig":
        presets = {"toy": TOY_FILTERS, "full": FULL_FILTERS}
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(presets)}")
        filters = presets[name]
        return cls(filters=filters, depth=len(filters) - 1, **overrides)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        return cls(**{**d, "filters": tuple(d["filters"])})


def _layer_specs(cfg: NetworkConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, weight shape) for every layer, in parameter order."""
    f, D = cfg.filters, cfg.depth
    specs = []
    cin = cfg.in_channels
    for i in range(1, D + 1):
        specs.append((f"enc{i}", "conv", (f[i], cin, 4, 4)))
        cin = f[i]
    specs.append(("transition", "conv", (f[D], f[D], 3, 3)))
    cin = f[D]
    for i in range(D, 0, -1):
        specs.append((f"dec{i}", "convT", (cin, f[i - 1], 4, 4)))
        cin = 2 * f[i - 1] if i > 1 else f[0]
    specs.append(("head", "conv", (cfg.out_channels, f[0], 1, 1)))
    return specs


def parameter_count(cfg: NetworkConfig) -> int:
    total = 0
    for _, kind, shape in _layer_specs(cfg):
        total += int(np.prod(shape))
        total += shape[1] if kind == "convT" else shape[0]
    return total


class Network:
    """Parameters plus the forward pass. Training mutates parameters in place."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor], rng: np.random.Generator):
        self.config = config
        self.params = params
        self.rng = rng
        self.forward_calls = 0

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Network":
        """Copy with parameters cast to ``dtype`` (float64 for gradient checks)."""
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return Network(self.config, params, rng)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x, train_mode: bool = False) -> Tensor:
        return forward(self, x, train_mode)


def build_network(config: NetworkConfig, dtype=np.float32) -> Network:
    """Create a network with seeded Kaiming-uniform weights.

    Biases start at zero except the head, which starts every mask at 1.0.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, kind, shape in _layer_specs(config):
        if kind == "convT":
            cin, cout, kh, kw = shape
            fan_in = cin * kh * kw // 4  # stride 2: each output sees a quarter of the taps
            n_bias = cout
        else:
            cout, cin, kh, kw = shape
            fan_in = cin * kh * kw
            n_bias = cout
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        bias = np.zeros(n_bias, dtype=dtype)
        if name == "head":
            # every mask starts at 1.0 (estimate = mixture); a mid-range start saturates weak sources
            bias[:] = np.log(1.0 / (config.mask_ceiling - 1.0))
        params[f"{name}.bias"] = Tensor(bias, requires_grad=True, name=f"{name}.bias")
    return Network(config, params, rng)


def forward(net: Network, x, train_mode: bool = False) -> Tensor:
    """Map (B, 1, H, W) log-magnitude input to (B, K, H, W) masks in [0, ceiling]."""
    cfg = net.config
    x = ad.as_tensor(x)
    if x.data.dtype != net.dtype:
        x = Tensor(x.data.astype(net.dtype))
    if x.data.ndim != 4:
        raise ValueError(f"expected a 4-D (B, C, H, W) input, got shape {x.shape}")
    B, C, H, W = x.shape
    if C != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channel(s), got {C}")
    step = 2 ** cfg.depth
    if H % step or W % step:
        raise ValueError(f"spatial size {H}x{W} is not divisible by 2**depth = {step}")
    net.forward_calls += 1
    p = net.params
    D = cfg.depth

    skips = []
    h = x
    for i in range(1, D + 1):
        h = ad.conv2d(h, p[f"enc{i}.weight"], p[f"enc{i}.bias"], stride=2, pad=1)
        h = ad.leaky_relu(h, 0.2)
        if train_mode:
            h = ad.dropout(h, cfg.dropout_rate, net.rng)
        skips.append(h)
    h = ad.conv2d(h, p["transition.weight"], p["transition.bias"], stride=1, pad=1)
    for i in range(D, 0, -1):
        h = ad.conv_transpose2d(h, p[f"dec{i}.weight"], p[f"dec{i}.bias"], stride=2, pad=1)
        h = ad.relu(h)
        if i > 1:
            h = ad.concat([h, skips[i - 2]], axis=1)
    h = ad.conv2d(h, p["head.weight"], p["head.bias"])
    return ad.mul(ad.sigmoid(h), net.dtype.type(cfg.mask_ceiling))


def sgd_step(net: Network, learning_rate: float) -> None:
    """Plain SGD: ``p -= lr * grad`` for every parameter, then clear grads."""
    missing = [name for name, p in net.params.items() if p.grad is None]
    if missing:
        raise ValueError(f"parameters without gradients: {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for p in net.params.values():
        if learning_rate != 0:
            p.data -= p.data.dtype.type(learning_rate) * p.grad
        p.grad = None


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(net: Network, path, epoch: int = 0, state: dict | None = None) -> None:
    """Write magic, version, config JSON, float32 parameters, epoch and RNG/trainer state."""
    names = list(net.params)
    header = {"config": net.config.to_dict(), "parameters": [[n, list(net.params[n].shape)] for n in names]}
    cfg_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tail = {"rng": net.rng.bit_generator.state, "state": state or {}}
    tail_blob = json.dumps(tail, sort_keys=True, default=_json_default).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        for n in names:
            fh.write(np.ascontiguousarray(net.params[n].data, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", epoch))
        fh.write(struct.pack("<I", len(tail_blob)))
        fh.write(tail_blob)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def load_checkpoint(path, expect: NetworkConfig | dict | None = None) -> tuple[Network, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns the network and a dict with ``epoch`` and the saved ``state``.
    ``expect`` may be a full config or a dict of fields (e.g.
    ``{"out_channels": 4}``) that must match.
    """
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic / format version)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (n,) = struct.unpack("<I", take(4))
    header = json.loads(take(n).decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    if expect is not None:
        want = expect.to_dict() if isinstance(expect, NetworkConfig) else dict(expect)
        have = config.to_dict()
        bad = {k: (v, have.get(k)) for k, v in want.items() if k != "seed" and have.get(k) != (list(v) if isinstance(v, tuple) else v)}
        if bad:
            raise ConfigError(f"checkpoint config mismatch (expected, found): {bad}")
    expected_names = [name for name, _ in _expected_params(config)]
    if [p[0] for p in header["parameters"]] != expected_names:
        raise ConfigError("checkpoint parameter layout does not match its config")
    params = {}
    for name, shape in header["parameters"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    (epoch,) = struct.unpack("<I", take(4))
    (n,) = struct.unpack("<I", take(4))
    tail = json.loads(take(n).decode("utf-8"))
    if pos != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    rng = np.random.default_rng()
    rng.bit_generator.state = tail["rng"]
    return Network(config, params, rng), {"epoch": epoch, "state": tail["state"]}


def _expected_params(cfg: NetworkConfig):
    for name, kind, shape in _layer_specs(cfg):
        yield f"{name}.weight", shape
        yield f"{name}.bias", None
