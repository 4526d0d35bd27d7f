import numpy as np
import pytest
from hypothesis import given, strategies as st

from sfdet import _pykernels, kernels

try:
    from sfdet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")

shapes = st.tuples(st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 5),
                   st.sampled_from([1, 3]), st.sampled_from([1, 2]))


def _direct_im2col(x, k, stride, pad):
    # loop oracle: one row per output position, columns ordered (ky, kx, c)
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    rows = []
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                rows.append(xp[b, i * stride:i * stride + k, j * stride:j * stride + k].reshape(-1))
    return np.array(rows)


@given(shapes, st.integers(0, 2**31))
def test_python_im2col_matches_loop_oracle(shape, seed):
    n, h, w, c, k, stride = shape
    x = np.random.default_rng(seed).random((n, h, w, c))
    np.testing.assert_array_equal(_pykernels.im2col(x, k, stride, k // 2), _direct_im2col(x, k, stride, k // 2))


@given(shapes, st.integers(0, 2**31))
def test_col2im_is_adjoint_of_im2col(shape, seed):
    n, h, w, c, k, stride = shape
    rng = np.random.default_rng(seed)
    x = rng.random((n, h, w, c))
    cols = _pykernels.im2col(x, k, stride, k // 2)
    g = rng.random(cols.shape)
    back = _pykernels.col2im(g, n, h, w, c, k, stride, k // 2)
    assert np.isclose(np.sum(cols * g), np.sum(x * back), rtol=1e-10)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@given(shape=shapes, seed=st.integers(0, 2**31))
def test_compiled_matches_python(dtype, shape, seed):
    n, h, w, c, k, stride = shape
    rng = np.random.default_rng(seed)
    x = rng.random((n, h, w, c)).astype(dtype)
    a = _ckernels.im2col(x, k, stride, k // 2)
    b = _pykernels.im2col(x, k, stride, k // 2)
    assert a.dtype == dtype
    np.testing.assert_array_equal(a, b)
    g = rng.random(a.shape).astype(dtype)
    np.testing.assert_allclose(_ckernels.col2im(g, n, h, w, c, k, stride, k // 2),
                               _pykernels.col2im(g, n, h, w, c, k, stride, k // 2), rtol=1e-5, atol=1e-6)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_python_backend():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "import sfdet; print(sfdet.BACKEND)"],
                         env={"SFDET_KERNELS": "python", "PATH": ""}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
