"""Compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parec import kernels

IMPLS = kernels.backends()
needs_cython = pytest.mark.skipif("cython" not in IMPLS, reason="compiled kernels not built")


def test_backend_is_selected():
    assert kernels.BACKEND in IMPLS


def test_env_var_forces_fallback():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "import parec; print(parec.BACKEND)"],
                         env={"PAREC_PURE_PYTHON": "1", "PATH": ""}, capture_output=True,
                         text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_cython
@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 4), r=st.integers(1, 9), causal=st.booleans(), seed=st.integers(0, 999))
def test_masked_softmax_parity(m, r, causal, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5, size=(m, r, r))
    dy = rng.normal(size=(m, r, r))
    res = {}
    for name, k in IMPLS.items():
        y = np.empty_like(x)
        k.masked_softmax_fwd(x, causal, y)
        dx = np.empty_like(x)
        k.masked_softmax_bwd(y, dy, dx)
        res[name] = (y, dx)
    np.testing.assert_allclose(res["cython"][0], res["numpy"][0], rtol=0, atol=1e-14)
    np.testing.assert_allclose(res["cython"][1], res["numpy"][1], rtol=0, atol=1e-13)
    if causal:
        assert np.all(res["cython"][0][:, np.triu_indices(r, 1)[0], np.triu_indices(r, 1)[1]] == 0)


@needs_cython
@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 20), d=st.integers(1, 16), seed=st.integers(0, 999))
def test_layer_norm_parity(rows, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, d)) * rng.uniform(0.1, 10)
    g, b = rng.normal(size=d), rng.normal(size=d)
    dy = rng.normal(size=(rows, d))
    res = {}
    for name, k in IMPLS.items():
        y, xh, rs = np.empty_like(x), np.empty_like(x), np.empty(rows)
        k.layer_norm_fwd(x, g, b, 1e-8, y, xh, rs)
        dx, dg, db = np.empty_like(x), np.zeros(d), np.zeros(d)
        k.layer_norm_bwd(dy, xh, rs, g, dx, dg, db)
        res[name] = (y, dx, dg, db)
    for a, c in zip(res["cython"], res["numpy"]):
        np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-11)


@needs_cython
@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 12), c=st.integers(2, 30), seed=st.integers(0, 999))
def test_softmax_xent_parity(rows, c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(rows, c))
    targets = rng.integers(0, c, size=rows).astype(np.int64)
    out = {}
    for name, k in IMPLS.items():
        grad = np.full_like(logits, np.nan)
        loss = k.softmax_xent(logits, targets, grad, 0.5)
        out[name] = (loss, grad)
    assert out["cython"][0] == pytest.approx(out["numpy"][0], rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(out["cython"][1], out["numpy"][1], rtol=0, atol=1e-14)
    assert np.all(out["cython"][1][targets == 0] == 0)
    assert np.all(out["cython"][1][:, 0] == 0)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_count_greater_ties_are_optimistic(name):
    k = IMPLS[name]
    scores = np.array([[9.0, 1.0, 1.0, 1.0], [0.0, 5.0, 3.0, 4.0]])
    ranks = np.empty(2, dtype=np.int64)
    k.count_greater(scores, np.array([2, 3], dtype=np.int64), ranks)
    assert ranks.tolist() == [1, 2]


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_xent_hand_value(name):
    # column 0 is padding; two real items with logits [2, 0], target item 1
    logits = np.array([[100.0, 2.0, 0.0]])
    grad = np.empty_like(logits)
    loss = IMPLS[name].softmax_xent(logits, np.array([1], dtype=np.int64), grad, 1.0)
    assert loss == pytest.approx(-np.log(np.exp(2) / (np.exp(2) + 1)), abs=1e-15)
    assert loss == pytest.approx(0.1269, abs=5e-5)
