import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsnmt import _kernels_py as py
from rsnmt import kernels

try:
    from rsnmt import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

shapes = st.tuples(st.integers(1, 9), st.integers(2, 17))
dtypes = st.sampled_from([np.float32, np.float64])


def tol(dtype):
    return dict(rtol=1e-5, atol=1e-5) if dtype == np.float32 else dict(rtol=1e-11, atol=1e-12)


def arr(rng, shape, dtype, scale=3.0):
    return np.ascontiguousarray((rng.standard_normal(shape) * scale).astype(dtype))


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_env_forces_pure_python():
    code = "import rsnmt.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, RSNMT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@settings(max_examples=40, deadline=None)
@given(shapes, dtypes, st.integers(0, 2**31))
def test_layer_norm_parity(shape, dtype, seed):
    rng = np.random.default_rng(seed)
    x, dy = arr(rng, shape, dtype), arr(rng, shape, dtype)
    gain, bias = arr(rng, shape[1], dtype), arr(rng, shape[1], dtype)
    a = cy.layer_norm_fwd(x, gain, bias, 1e-6)
    b = py.layer_norm_fwd(x, gain, bias, 1e-6)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, **tol(dtype))
    xhat, rstd = b[1], np.ascontiguousarray(b[2])
    for u, v in zip(cy.layer_norm_bwd(dy, xhat, rstd, gain), py.layer_norm_bwd(dy, xhat, rstd, gain)):
        np.testing.assert_allclose(u, v, **tol(dtype))


@needs_ext
@settings(max_examples=40, deadline=None)
@given(shapes, dtypes, st.integers(0, 2**31))
def test_softmax_parity(shape, dtype, seed):
    rng = np.random.default_rng(seed)
    x, dy = arr(rng, shape, dtype, 10.0), arr(rng, shape, dtype)
    y = cy.softmax_fwd(x)
    np.testing.assert_allclose(y, py.softmax_fwd(x), **tol(dtype))
    np.testing.assert_allclose(y.sum(1), 1.0, rtol=1e-5)
    np.testing.assert_allclose(cy.softmax_bwd(y, dy), py.softmax_bwd(y, dy), **tol(dtype))


@needs_ext
@settings(max_examples=40, deadline=None)
@given(shapes, dtypes, st.integers(0, 2**31), st.sampled_from([0.0, 0.1, 0.3]))
def test_smoothed_ce_parity(shape, dtype, seed, eps):
    rng = np.random.default_rng(seed)
    logits = arr(rng, shape, dtype)
    gold = rng.integers(0, shape[1], size=shape[0]).astype(np.int64)
    lc, nc, gc = cy.smoothed_ce(logits, gold, eps, 0)
    lp, npad, gp = py.smoothed_ce(logits, gold, eps, 0)
    assert nc == npad == int((gold != 0).sum())
    assert lc == pytest.approx(lp, rel=1e-5 if dtype == np.float32 else 1e-10, abs=1e-6)
    np.testing.assert_allclose(gc, gp, **tol(dtype))
    assert not gc[gold == 0].any()


def test_smoothed_ce_matches_definition():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 7))
    gold = np.array([3, 0, 6, 1, 2], dtype=np.int64)
    total, count, _ = kernels.smoothed_ce(logits, gold, 0.1, 0)
    ref = 0.0
    for row, g in zip(logits, gold):
        if g == 0:
            continue
        logp = row - np.log(np.exp(row).sum())
        q = np.full(7, 0.1 / 6)
        q[g] = 0.9
        ref -= float(q @ logp)
    assert count == 4 and total == pytest.approx(ref, rel=1e-12)


@needs_ext
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), dtypes, st.integers(0, 2**31))
def test_scatter_add_parity(n, rows, dtype, seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, rows, size=n).astype(np.int64)  # repeated ids must accumulate
    vals = arr(rng, (n, 4), dtype)
    a = np.zeros((rows, 4), dtype)
    b = np.zeros((rows, 4), dtype)
    cy.scatter_add_rows(a, ids, vals)
    py.scatter_add_rows(b, ids, vals)
    np.testing.assert_allclose(a, b, **tol(dtype))


@needs_ext
def test_dtype_is_preserved():
    x = np.ones((2, 3), np.float32)
    assert cy.softmax_fwd(x).dtype == np.float32
    assert cy.layer_norm_fwd(x, np.ones(3, np.float32), np.zeros(3, np.float32), 1e-6)[0].dtype == np.float32
