import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrshare.linalg import (FlopCounter, ShapeError, as_matrix, cosine_similarity, get_dtype, l1_norm_mean,
                            matmul, resolve_dtype, row_softmax, row_sum, working_dtype)


def triple_loop(a, b):
    """Scalar oracle: each entry summed left to right in the input precision."""
    t = a.dtype.type
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = t(0)
            for p in range(a.shape[1]):
                acc = t(acc + t(a[i, p] * b[p, j]))
            out[i, j] = acc
    return out


def test_matmul_identity_and_hand_cases():
    eye = np.eye(2)
    m = np.array([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(matmul(eye, m), m)
    assert np.array_equal(matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11.0]])


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_matmul_matches_triple_loop_bit_exactly(rng, dtype):
    for m, k, n in [(7, 5, 3), (1, 1, 1), (4, 9, 2), (3, 16, 5)]:
        a = rng.standard_normal((m, k)).astype(dtype)
        b = rng.standard_normal((k, n)).astype(dtype)
        assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2)))


def test_matmul_counts_macs():
    c = FlopCounter()
    matmul(np.ones((3, 4)), np.ones((4, 5)), c, "mlp")
    matmul(np.ones((2, 4)), np.ones((4, 1)), c, "qkv_proj")
    assert c.macs_by_category["mlp"] == 60
    assert c.macs_by_category["qkv_proj"] == 8
    assert c.total == 68
    with pytest.raises(KeyError):
        c.add("softmax", 1)
    with pytest.raises(ValueError):
        c.add("mlp", -1)


def test_counter_arithmetic():
    a, b = FlopCounter(), FlopCounter()
    a.add("mlp", 5)
    a.hidden_token_passes = 3
    b.add("mlp", 2)
    b.add("attn_lr", 4)
    assert (a + b).macs_by_category["attn_lr"] == 4
    assert (a - b).macs_by_category["mlp"] == 3
    assert a.to_dict()["total_macs"] == 5


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_matmul_associative_on_small_integers(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = (r.integers(-8, 9, size=s).astype(np.float64) for s in ((m, k), (k, n), (n, p)))
    assert np.array_equal(matmul(matmul(a, b), c), matmul(a, matmul(b, c)))


def test_row_sum_is_sequential_and_padding_invariant(rng):
    x = rng.standard_normal((5, 37))
    expect = np.array([math.fsum([0.0]) + _seq(row) for row in x])
    assert np.array_equal(row_sum(x), expect)
    padded = np.concatenate([x, np.zeros((5, 91))], axis=1)
    assert np.array_equal(row_sum(padded), row_sum(x))


def _seq(row):
    acc = 0.0
    for v in row:
        acc += float(v)
    return acc


def test_row_softmax_examples():
    assert np.allclose(row_softmax(np.zeros((1, 3))), 1 / 3, rtol=0, atol=1e-15)
    assert np.array_equal(row_softmax(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])
    assert np.allclose(row_softmax(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], rtol=0, atol=1e-15)


def test_row_softmax_masked_entries_are_exact_zero():
    p = row_softmax(np.array([[0.0, -np.inf, 1.0]]))
    assert p[0, 1] == 0.0
    with pytest.raises(FloatingPointError):
        row_softmax(np.array([[-np.inf, -np.inf]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_row_softmax_rows_are_distributions(s):
    p = row_softmax(s)
    assert (p >= 0).all()
    assert np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-50, 50, allow_nan=False, width=32)))
def test_row_softmax_rows_sum_to_one_f32(s):
    assert np.allclose(row_softmax(s).sum(axis=1), 1.0, rtol=0, atol=1e-6)


def test_cosine_examples():
    a = np.array([[1.0, 2.0], [3.0, -1.0]])
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        cosine_similarity([1.0], [1.0, 2.0])


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), arrays(np.float64, 6, elements=st.floats(-10, 10)),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariance(a, b, alpha, beta):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert cosine_similarity(alpha * a, beta * b) == pytest.approx(c, abs=1e-12)


def test_l1_norm_mean(rng):
    assert l1_norm_mean(np.zeros((3, 3))) == 0.0
    assert l1_norm_mean([[-1.0, 1.0], [2.0, -2.0]]) == 1.5
    x = rng.standard_normal((4, 6))
    expect = sum(abs(float(v)) for v in x.ravel()) / x.size
    assert l1_norm_mean(x) == pytest.approx(expect, rel=1e-14)


def test_dtype_configuration():
    assert get_dtype() == np.float64
    with working_dtype("f32") as dt:
        assert dt == np.float32
        assert as_matrix([1, 2]).dtype == np.float32
        assert as_matrix([1, 2]).shape == (1, 2)
    assert get_dtype() == np.float64
    with pytest.raises(ValueError):
        resolve_dtype("f16")
    with pytest.raises(FloatingPointError):
        matmul(np.array([[1e308]]), np.array([[1e10]]))
