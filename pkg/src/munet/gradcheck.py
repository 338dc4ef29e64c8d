"""Finite-difference gradient checks for the autodiff ops and the full network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from munet import autodiff as ad
from munet import losses as L
from munet.autodiff import Tensor

# inputs to piecewise ops are kept this far from their kinks
KINK_MARGIN = 0.05
# one-sided slopes differing by more than this (relative) flag a kink inside the probe
KINK_TOLERANCE = 1e-4
CANDIDATES = 8


@dataclass
class GradCheckResult:
    op: str
    trials: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a| + |n|, floor)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float, index=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (modified in place and restored)."""
    idx = list(np.ndindex(x.shape)) if index is None else index
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out if index is not None else out.reshape(x.shape)


def _away_from_zero(rng, shape):
    x = rng.uniform(KINK_MARGIN, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _shape(rng, lo=1, hi=4, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _case_add(rng):
    s = _shape(rng, n=3)
    return [rng.normal(size=s), rng.normal(size=(1,) + s[1:])], lambda a, b: ad.add(a, b)


def _case_sub(rng):
    s = _shape(rng, n=3)
    return [rng.normal(size=s), rng.normal(size=s[-1:])], lambda a, b: ad.sub(a, b)


def _case_mul(rng):
    s = _shape(rng, n=3)
    return [rng.normal(size=s), rng.normal(size=(s[0], 1, s[2]))], lambda a, b: ad.mul(a, b)


def _case_abs(rng):
    return [_away_from_zero(rng, _shape(rng, n=3))], ad.absolute


def _case_relu(rng):
    return [_away_from_zero(rng, _shape(rng, n=3))], ad.relu


def _case_leaky_relu(rng):
    return [_away_from_zero(rng, _shape(rng, n=3))], lambda x: ad.leaky_relu(x, 0.2)


def _case_sigmoid(rng):
    return [rng.normal(scale=3.0, size=_shape(rng, n=3))], ad.sigmoid


def _case_sum(rng):
    axis = int(rng.integers(0, 3))
    return [rng.normal(size=_shape(rng, n=3))], lambda x: ad.sum_(x, axis=axis)


def _case_mean(rng):
    return [rng.normal(size=_shape(rng, n=4))], lambda x: ad.mean(x, axis=(0, 2, 3))


def _case_l1_mean(rng):
    return [_away_from_zero(rng, _shape(rng, n=4))], lambda x: ad.l1_mean(x, axis=(0, 2, 3))


def _case_concat(rng):
    b, h, w = _shape(rng, n=3)
    c1, c2 = _shape(rng, n=2)
    return [rng.normal(size=(b, c1, h, w)), rng.normal(size=(b, c2, h, w))], lambda a, c: ad.concat([a, c], axis=1)


def _case_dropout(rng):
    seed = int(rng.integers(2**31))
    # a fresh generator per call keeps the mask fixed across finite-difference evaluations
    return [rng.normal(size=_shape(rng, n=3))], lambda x: ad.dropout(x, 0.3, np.random.default_rng(seed))


def _case_conv2d(rng):
    b, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    k = int(rng.choice([1, 3, 4]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    h, w = (int(v) for v in rng.integers(k, k + 5, size=2))
    args = [rng.normal(size=(b, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)]
    return args, lambda x, wt, bias: ad.conv2d(x, wt, bias, stride=stride, pad=pad)


def _case_conv_transpose2d(rng):
    b, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    h, w = (int(v) for v in rng.integers(1, 5, size=2))
    args = [rng.normal(size=(b, cin, h, w)), rng.normal(size=(cin, cout, 4, 4)), rng.normal(size=cout)]
    return args, lambda x, wt, bias: ad.conv_transpose2d(x, wt, bias, stride=2, pad=1)


OPS: dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "absolute": _case_abs,
    "relu": _case_relu,
    "leaky_relu": _case_leaky_relu,
    "sigmoid": _case_sigmoid,
    "sum": _case_sum,
    "mean": _case_mean,
    "l1_mean": _case_l1_mean,
    "concat": _case_concat,
    "dropout": _case_dropout,
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
}


def grad_check(op_name: str, trial_count: int = 20, eps: float = 1e-6, seed: int = 0) -> GradCheckResult:
    """Compare backprop against central differences on random float64 inputs.

    Every output is contracted with a fixed random tensor so each trial checks
    a full vector-Jacobian product against all inputs.
    """
    if op_name not in OPS:
        raise KeyError(f"unknown op {op_name!r}; known ops: {sorted(OPS)}")
    rng = np.random.default_rng([seed, len(op_name)])
    worst = 0.0
    for _ in range(trial_count):
        arrays, op = OPS[op_name](rng)
        inputs = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = op(*inputs)
        proj = rng.normal(size=out.shape)
        ad.sum_(ad.mul(out, proj)).backward()

        def f():
            return float(np.sum(op(*[Tensor(t.data) for t in inputs]).data * proj))

        for t in inputs:
            worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data, eps)))
    return GradCheckResult(op_name, trial_count, worst)


def _probe(f: Callable[[], float], move: Callable[[float], None], eps: float) -> tuple[float, bool]:
    """Central difference along ``move`` plus a kink flag.

    The one-sided slopes agree to O(eps) on smooth stretches; a larger
    disagreement means a ReLU / |x| kink lies inside [-eps, eps].
    """
    move(eps)
    fp = f()
    move(-eps)
    fm = f()
    move(0.0)
    f0 = f()
    fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
    kink = abs(fwd - bwd) > KINK_TOLERANCE * max(abs(fwd) + abs(bwd), 1e-8)
    return (fp - fm) / (2 * eps), kink


def network_grad_check(net, loss_kind: str, size: int = 64, batch: int = 2, coords: int = 40,
                       eps: float = 1e-6, seed: int = 0, directions: int = 1) -> float:
    """Max relative error of the full network + loss gradient (``net`` should be float64).

    Checks ``coords`` parameter coordinates spread over all layers and
    ``directions`` random directions through every parameter at once. Probes
    whose difference interval straddles a kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    k = net.config.out_channels
    x = rng.normal(-2.0, 1.5, size=(batch, 1, size, size))
    mix = np.exp(rng.normal(-1.0, 1.0, size=(batch, 1, size, size)))
    src = mix * rng.dirichlet(np.ones(k), size=(batch, size, size)).transpose(0, 3, 1, 2)
    masks = rng.uniform(0, 3, size=(batch, k, size, size))
    weights = rng.uniform(0.5, 2.0, size=k)

    def loss() -> Tensor:
        est = net(x, train_mode=False)
        per = L.task_losses(est, loss_kind, target_masks=masks, source_mags=src, mixture_mags=mix)
        return L.total_loss(per, weights)

    net.zero_grad()
    loss().backward()
    named = net.named_parameters()
    grads = {n: p.grad.copy() for n, p in named}

    def f():
        return float(loss().data)

    worst = 0.0
    budget = 5 * (coords + directions)
    done = 0
    j = 0
    while done < coords:
        name, p = named[j % len(named)]
        j += 1
        # the largest of a few random candidates: a near-zero gradient would only measure rounding noise
        cands = [tuple(int(rng.integers(0, s)) for s in p.shape) for _ in range(CANDIDATES)]
        idx = max(cands, key=lambda c: abs(grads[name][c]))
        old = p.data[idx]

        def move(d, p=p, idx=idx, old=old):
            p.data[idx] = old + d

        num, kink = _probe(f, move, eps)
        if kink:
            budget -= 1
            if budget <= 0:
                raise RuntimeError("too many probes straddle kinks; use a smaller eps")
            continue
        worst = max(worst, rel_error(np.array([grads[name][idx]]), np.array([num])))
        done += 1

    saved = {n: p.data.copy() for n, p in named}
    done = 0
    while done < directions:
        direction = {n: rng.normal(size=p.shape) for n, p in named}

        def move_all(d):
            for n, p in named:
                p.data[...] = saved[n] + d * direction[n]

        num, kink = _probe(f, move_all, eps)
        if kink:
            budget -= 1
            if budget <= 0:
                raise RuntimeError("too many probes straddle kinks; use a smaller eps")
            continue
        analytic = sum(float(np.sum(grads[n] * direction[n])) for n, _ in named)
        worst = max(worst, rel_error(np.array([analytic]), np.array([num])))
        done += 1
    net.zero_grad()
    return worst
