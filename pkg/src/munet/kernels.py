"""Convolution lowering kernels with a compiled fast path.

``im2col`` turns a (B, C, H, W) batch into a (B, C*kh*kw, Ho*Wo) column
matrix so a strided convolution becomes one matmul; ``col2im`` is its
adjoint (scatter-add back onto the image grid) and doubles as the forward
pass of a transposed convolution.

The Cython extension ``munet._ckernels`` is used when it was built. The
NumPy implementation below is always available; set ``MUNET_PURE_PYTHON=1``
to force it. Both backends accumulate in the same order, so results are
bit-identical.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from munet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_backend = "python" if (_ckernels is None or os.environ.get("MUNET_PURE_PYTHON")) else "cython"


def backend() -> str:
    """Name of the active kernel backend, ``"cython"`` or ``"python"``."""
    return _backend


def available_backends() -> list[str]:
    return ["python"] if _ckernels is None else ["cython", "python"]


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend (used by tests and benchmarks)."""
    global _backend
    if name not in available_backends():
        raise ValueError(f"kernel backend {name!r} is not available")
    previous = _backend
    _backend = name
    try:
        yield
    finally:
        _backend = previous


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def py_im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, out_h * out_w)


def py_col2im(cols: np.ndarray, C: int, hp: int, wp: int, kh: int, kw: int,
              stride: int, out_h: int, out_w: int) -> np.ndarray:
    B = cols.shape[0]
    c6 = cols.reshape(B, C, kh, kw, out_h, out_w)
    out = np.zeros((B, C, hp, wp), dtype=cols.dtype)
    he = (out_h - 1) * stride + 1
    we = (out_w - 1) * stride + 1
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + he : stride, kj : kj + we : stride] += c6[:, :, ki, kj]
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x`` (B, C, H, W) into columns of shape (B, C*kh*kw, Ho*Wo)."""
    H, W = x.shape[2:]
    out_h = conv_out_size(H, kh, stride, pad)
    out_w = conv_out_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = np.ascontiguousarray(xp)
    if _backend == "cython":
        return _ckernels.im2col(xp, kh, kw, stride, out_h, out_w)
    return py_im2col(xp, kh, kw, stride, out_h, out_w)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
           stride: int, pad: int) -> np.ndarray:
    """Scatter-add columns back onto an image of ``shape`` (B, C, H, W)."""
    _, C, H, W = shape
    out_h = conv_out_size(H, kh, stride, pad)
    out_w = conv_out_size(W, kw, stride, pad)
    hp, wp = H + 2 * pad, W + 2 * pad
    cols = np.ascontiguousarray(cols)
    if _backend == "cython":
        full = _ckernels.col2im(cols, C, hp, wp, kh, kw, stride, out_h, out_w)
    else:
        full = py_col2im(cols, C, hp, wp, kh, kw, stride, out_h, out_w)
    if pad:
        full = full[:, :, pad : pad + H, pad : pad + W]
    return full
