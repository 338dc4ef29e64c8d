import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from munet import kernels


def dense_conv(x, w, stride, pad):
    """Direct-loop convolution oracle."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("bckl,ockl->bo", patch, w)
    return out


geometry = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(4, 9), st.integers(4, 9),
    st.sampled_from([1, 3, 4]), st.sampled_from([1, 2]), st.integers(0, 1),
)


@given(geometry)
def test_im2col_matmul_equals_direct_convolution(g):
    B, C, H, W, k, s, p = g
    rng = np.random.default_rng(sum(g))
    x = rng.standard_normal((B, C, H, W))
    w = rng.standard_normal((2, C, k, k))
    cols = kernels.im2col(x, k, k, s, p)
    Ho, Wo = kernels.conv_out_size(H, k, s, p), kernels.conv_out_size(W, k, s, p)
    out = (w.reshape(2, -1) @ cols).reshape(B, 2, Ho, Wo)
    np.testing.assert_allclose(out, dense_conv(x, w, s, p), atol=1e-10)


@given(geometry)
def test_col2im_is_adjoint_of_im2col(g):
    B, C, H, W, k, s, p = g
    rng = np.random.default_rng(sum(g) + 1)
    x = rng.standard_normal((B, C, H, W))
    cols = kernels.im2col(x, k, k, s, p)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, x.shape, k, k, s, p))
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 16, 12)).astype(dtype)
    for k, s, p in [(4, 2, 1), (3, 1, 1), (1, 1, 0)]:
        with kernels.use_backend("python"):
            c_py = kernels.im2col(x, k, k, s, p)
            back_py = kernels.col2im(c_py, x.shape, k, k, s, p)
        with kernels.use_backend("cython"):
            c_cy = kernels.im2col(x, k, k, s, p)
            back_cy = kernels.col2im(c_cy, x.shape, k, k, s, p)
        assert c_py.dtype == c_cy.dtype == dtype
        assert np.array_equal(c_py, c_cy)
        assert np.array_equal(back_py, back_cy)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        with kernels.use_backend("fortran"):
            pass


def test_pure_python_env_forces_fallback():
    import subprocess
    import sys

    code = "from munet import kernels; print(kernels.backend())"
    out = subprocess.run([sys.executable, "-c", code], env={"MUNET_PURE_PYTHON": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
