import struct

import numpy as np
import pytest

from munet import autodiff as ad
from munet import losses as L
from munet.gradcheck import network_grad_check
from munet.network import (FULL_FILTERS, TOY_FILTERS, CheckpointError, ConfigError, NetworkConfig, build_network,
                           forward, load_checkpoint, parameter_count, save_checkpoint, sgd_step)


@pytest.fixture(scope="module")
def toy():
    return build_network(NetworkConfig(seed=0))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(filters=(4, 8), depth=6)
    with pytest.raises(ConfigError):
        NetworkConfig(out_channels=0)
    with pytest.raises(ConfigError):
        NetworkConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        NetworkConfig.preset("huge")
    cfg = NetworkConfig.preset("full", out_channels=4)
    assert tuple(cfg.filters) == FULL_FILTERS and NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_toy_shape_contract(toy, rng):
    x = rng.normal(-3, 2, size=(2, 1, 256, 256)).astype(np.float32)
    out = toy(x)
    assert out.shape == (2, 2, 256, 256)
    assert np.all(out.data >= 0) and np.all(out.data <= 10)


def test_four_sources_one_forward(rng):
    net = build_network(NetworkConfig(out_channels=4, seed=1))
    out = net(rng.standard_normal((1, 1, 64, 64)))
    assert out.shape == (1, 4, 64, 64) and net.forward_calls == 1


def test_indivisible_and_bad_shapes(toy):
    with pytest.raises(ValueError, match="divisible"):
        toy(np.zeros((1, 1, 100, 64), dtype=np.float32))
    with pytest.raises(ValueError):
        toy(np.zeros((1, 2, 64, 64), dtype=np.float32))
    with pytest.raises(ValueError):
        toy(np.zeros((1, 64, 64), dtype=np.float32))


def test_same_seed_same_parameters():
    a, b = build_network(NetworkConfig(seed=3)), build_network(NetworkConfig(seed=3))
    c = build_network(NetworkConfig(seed=4))
    assert a.digest() == b.digest() != c.digest()
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in c.named_parameters()]


def test_eval_forward_deterministic_train_forward_stochastic(toy, rng):
    x = rng.standard_normal((1, 1, 64, 64)).astype(np.float32)
    assert np.array_equal(toy(x).data, toy(x).data)
    assert not np.array_equal(toy(x, train_mode=True).data, toy(x, train_mode=True).data)


def test_zero_head_bias_zero_input_gives_half_ceiling():
    net = build_network(NetworkConfig(seed=0))
    net.params["head.bias"].data[:] = 0.0
    out = net(np.zeros((1, 1, 64, 64), dtype=np.float32)).data
    # every activation upstream of the head is exactly zero for zero input and zero hidden biases
    np.testing.assert_array_equal(out, np.full(out.shape, 5.0, dtype=np.float32))


def test_default_head_bias_starts_masks_at_one():
    net = build_network(NetworkConfig(seed=0))
    out = net(np.zeros((1, 1, 64, 64), dtype=np.float32)).data
    np.testing.assert_allclose(out, 1.0, rtol=1e-6)


def test_parameter_counts():
    toy_n = parameter_count(NetworkConfig(filters=TOY_FILTERS))
    assert toy_n == build_network(NetworkConfig()).num_parameters() == 271_886
    assert toy_n < 500_000
    full_n = parameter_count(NetworkConfig.preset("full"))
    assert abs(full_n - 124e6) / 124e6 < 0.35


def test_float64_gradients_both_losses():
    net = build_network(NetworkConfig(seed=2)).astype(np.float64)
    for kind in ("direct", "indirect"):
        assert network_grad_check(net, kind, size=64, coords=30) < 1e-3


def test_network_gradient_other_seeds():
    for seed in (1, 5):
        net = build_network(NetworkConfig(seed=seed)).astype(np.float64)
        assert network_grad_check(net, "indirect", size=64, coords=14, seed=seed, directions=2) < 1e-3


def test_large_step_straddles_kinks():
    # with a 1e-3 step nearly every probe crosses a ReLU kink; the checker refuses rather than guess
    net = build_network(NetworkConfig(seed=5)).astype(np.float64)
    with pytest.raises(RuntimeError, match="kinks"):
        network_grad_check(net, "direct", size=64, coords=14, eps=1e-3)


def test_backward_populates_all_and_sgd(rng):
    net = build_network(NetworkConfig(seed=0))
    x = rng.standard_normal((1, 1, 64, 64)).astype(np.float32)
    est = net(x, train_mode=True)
    per = L.task_losses(est, "direct", target_masks=rng.uniform(0, 2, est.shape))
    L.total_loss(per, [1.0, 1.0]).backward()
    assert all(p.grad is not None and p.grad.shape == p.shape for p in net.parameters)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    grads = {n: p.grad.copy() for n, p in net.named_parameters()}
    sgd_step(net, 0.01)
    for n, p in net.named_parameters():
        np.testing.assert_array_equal(p.data, before[n] - np.float32(0.01) * grads[n])
        assert p.grad is None


def test_sgd_examples():
    net = build_network(NetworkConfig(seed=0))
    with pytest.raises(ValueError, match="without gradients"):
        sgd_step(net, 0.01)
    digest = net.digest()
    for p in net.parameters:
        p.grad = np.ones_like(p.data)
    sgd_step(net, 0.0)
    assert net.digest() == digest
    # a single scalar parameter p=1, grad=2, lr=0.01, stepped twice with no momentum
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    for expected in (0.98, 0.96):
        p.grad = np.array([2.0])
        p.data -= 0.01 * p.grad
        assert p.data[0] == pytest.approx(expected)
    net2 = build_network(NetworkConfig(seed=0))
    for p in net2.parameters:
        p.grad = np.full_like(p.data, 2.0)
    sgd_step(net2, 0.01)
    for p in net2.parameters:
        p.grad = np.full_like(p.data, 2.0)
    sgd_step(net2, 0.01)
    ref = build_network(NetworkConfig(seed=0))
    for (n, a), (_, b) in zip(net2.named_parameters(), ref.named_parameters()):
        np.testing.assert_allclose(a.data, b.data - 0.04, atol=1e-6)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_network(NetworkConfig(out_channels=3, seed=9))
    net.rng.random(5)
    save_checkpoint(net, tmp_path / "a.munet", epoch=7, state={"k": [1, 2]})
    back, meta = load_checkpoint(tmp_path / "a.munet")
    assert meta == {"epoch": 7, "state": {"k": [1, 2]}}
    assert back.config == net.config
    for (n, a), (m, b) in zip(net.named_parameters(), back.named_parameters()):
        assert n == m and a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
    assert back.rng.random() == net.rng.random()
    save_checkpoint(back, tmp_path / "b.munet", epoch=7, state={"k": [1, 2]})
    # the RNG advanced once on each side, so the states (and bytes) agree
    save_checkpoint(net, tmp_path / "a2.munet", epoch=7, state={"k": [1, 2]})
    assert (tmp_path / "a2.munet").read_bytes() == (tmp_path / "b.munet").read_bytes()


def test_checkpoint_errors(tmp_path):
    net = build_network(NetworkConfig(seed=0))
    path = tmp_path / "c.munet"
    save_checkpoint(net, path)
    data = path.read_bytes()
    (tmp_path / "magic.munet").write_bytes(b"XXXXX" + data[5:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "magic.munet")
    (tmp_path / "ver.munet").write_bytes(data[:5] + struct.pack("<I", 99) + data[9:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.munet")
    (tmp_path / "short.munet").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.munet")
    (tmp_path / "long.munet").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.munet")
    with pytest.raises(ConfigError):
        load_checkpoint(path, expect={"out_channels": 4})
    load_checkpoint(path, expect=NetworkConfig(seed=123))  # seed alone is not a mismatch


def test_checkpoint_layout_is_little_endian_float32(tmp_path):
    net = build_network(NetworkConfig(seed=0))
    save_checkpoint(net, tmp_path / "c.munet", epoch=3)
    raw = (tmp_path / "c.munet").read_bytes()
    assert raw[:5] == b"MUNET"
    (n,) = struct.unpack("<I", raw[9:13])
    first = net.named_parameters()[0][1].data.ravel()
    stored = np.frombuffer(raw[13 + n : 13 + n + 4 * first.size], dtype="<f4")
    np.testing.assert_array_equal(stored, first)


def test_forward_counter():
    net = build_network(NetworkConfig(seed=0))
    for _ in range(3):
        forward(net, np.zeros((2, 1, 64, 64), dtype=np.float32))
    assert net.forward_calls == 3
