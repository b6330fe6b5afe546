"""Backend agreement: the compiled scan kernel and the numpy fallback must
implement the same contract, and each must match a plain per-row oracle."""

import numpy as np
import pytest

from near2 import _kernels
from near2._kernels import _numpy as fallback

native = _kernels.native

backends = [pytest.param(fallback, id="numpy")]
if native is not None:
    backends.append(pytest.param(native, id="native"))


def random_case(seed, count=200, d=32):
    rng = np.random.default_rng(seed)
    matrix = rng.normal(size=(count, d)).astype(np.float32)
    query = rng.normal(size=d)
    return matrix, query


@pytest.mark.parametrize("backend", backends)
def test_dots_match_per_row_oracle(backend):
    matrix, query = random_case(0)
    for m in (32, 17, 5, 1):
        out = backend.prefix_dot_products(matrix, query[:m], m)
        expected = np.array(
            [np.dot(row[:m].astype(np.float64), query[:m]) for row in matrix]
        )
        np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("backend", backends)
def test_sq_norms_match_per_row_oracle(backend):
    matrix, _ = random_case(1)
    for m in (32, 9, 2):
        out = backend.prefix_sq_norms(matrix, m)
        expected = np.array([np.dot(r[:m].astype(np.float64), r[:m].astype(np.float64)) for r in matrix])
        np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("backend", backends)
def test_row_subsets_select_in_order(backend):
    matrix, query = random_case(2)
    idx = np.array([5, 3, 100, 7], dtype=np.int64)
    out = backend.prefix_dot_products(matrix, query[:16], 16, idx)
    full = backend.prefix_dot_products(matrix, query[:16], 16)
    assert out.shape == (4,)
    np.testing.assert_allclose(out, full[idx], rtol=1e-13, atol=1e-14)


@pytest.mark.skipif(native is None, reason="native kernel not built")
def test_backends_agree_closely():
    matrix, query = random_case(3, count=500, d=64)
    for m in (64, 33, 8):
        a = native.prefix_dot_products(matrix, query[:m], m)
        b = fallback.prefix_dot_products(matrix, query[:m], m)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)
        na = native.prefix_sq_norms(matrix, m)
        nb = fallback.prefix_sq_norms(matrix, m)
        np.testing.assert_allclose(na, nb, rtol=1e-13)


@pytest.mark.skipif(native is None, reason="native kernel not built")
def test_native_subset_is_bitwise_stable():
    # a row's value may never depend on which other rows are scanned
    matrix, query = random_case(4)
    full = native.prefix_dot_products(matrix, query[:20], 20)
    idx = np.arange(matrix.shape[0], dtype=np.int64)
    again = native.prefix_dot_products(matrix, query[:20], 20, idx)
    assert np.array_equal(full, again)
    some = np.array([0, 50, 199], dtype=np.int64)
    sub = native.prefix_dot_products(matrix, query[:20], 20, some)
    assert np.array_equal(sub, full[some])


def test_fallback_subset_of_everything_is_bitwise_stable():
    matrix, query = random_case(5, count=3 * 8192 + 17)  # cross block boundaries
    full = fallback.prefix_dot_products(matrix, query[:8], 8)
    idx = np.arange(matrix.shape[0], dtype=np.int64)
    again = fallback.prefix_dot_products(matrix, query[:8], 8, idx)
    assert np.array_equal(full, again)


def test_active_backend_exported():
    assert _kernels.backend_name() in ("native", "numpy")
    out = _kernels.prefix_dot_products(np.ones((2, 4), np.float32), np.ones(4), 4)
    np.testing.assert_allclose(out, [4.0, 4.0])
