import os
import subprocess
import sys

import numpy as np
import pytest

from pyramidhash import _pykernels, kernels

try:
    from pyramidhash import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")

CASES = [(3, 1, 1), (3, 2, 1), (3, 2, 0), (1, 1, 0), (3, 3, 2)]


@pytest.mark.parametrize("k,stride,pad", CASES)
def test_col2im_is_adjoint_of_im2col(k, stride, pad):
    rng = np.random.default_rng(k + stride + pad)
    x = rng.normal(size=(2, 3, 9, 7))
    cols = kernels.im2col(x, k, stride, pad)
    g = rng.normal(size=cols.shape)
    lhs = np.sum(cols * g)
    rhs = np.sum(x * kernels.col2im(g, x.shape, k, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_ext
@pytest.mark.parametrize("k,stride,pad", CASES)
def test_backends_bit_identical(k, stride, pad):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 4, 10, 8))
    a, b = _ckernels.im2col(x, k, stride, pad), _pykernels.im2col(x, k, stride, pad)
    assert a.tobytes() == b.tobytes()
    g = rng.normal(size=a.shape)
    assert _ckernels.col2im(g, x.shape, k, stride, pad).tobytes() == _pykernels.col2im(g, x.shape, k, stride, pad).tobytes()


@needs_ext
@pytest.mark.parametrize("words", [1, 2, 3])
def test_hamming_backends_agree(words):
    rng = np.random.default_rng(words)
    a = rng.integers(0, 2**64 - 1, size=(7, words), dtype=np.uint64, endpoint=True)
    b = rng.integers(0, 2**64 - 1, size=(9, words), dtype=np.uint64, endpoint=True)
    np.testing.assert_array_equal(_ckernels.hamming_matrix(a, b), _pykernels.hamming_matrix(a, b))


def test_hamming_matrix_counts_bits():
    a = np.array([[0b1010]], dtype=np.uint64)
    b = np.array([[0b0110], [0], [2**64 - 1]], dtype=np.uint64)
    np.testing.assert_array_equal(kernels.hamming_matrix(a, b), [[2, 2, 62]])


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    if _ckernels is not None:
        assert kernels.BACKEND == "cython" or os.environ.get("PYRAMIDHASH_PURE_PYTHON")


def test_env_var_forces_fallback():
    code = "from pyramidhash import kernels; print(kernels.BACKEND)"
    env = {**os.environ, "PYRAMIDHASH_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
