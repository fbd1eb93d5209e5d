"""Tests for the deterministic numeric kernels."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idiokv.errors import ShapeError
from idiokv.numerics import (
    avg_pool_1d,
    cosine_similarity,
    derive_seed,
    frobenius_norm,
    matmul,
    seeded_random_matrix,
    softmax_rows,
)


def test_matmul_identity():
    m = seeded_random_matrix(3, 5, seed=3, scale=1.0)
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_hand_example():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop_exactly():
    a = seeded_random_matrix(5, 4, seed=11, scale=1.0)
    b = seeded_random_matrix(4, 3, seed=12, scale=1.0)
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            expected[i, j] = acc
    np.testing.assert_array_equal(matmul(a, b), expected)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows([[0.0, 0.0, 0.0]]), [[1 / 3, 1 / 3, 1 / 3]])


def test_softmax_large_logits_do_not_overflow():
    out = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)
    assert out[0, 1] < 1e-300


def test_softmax_causal_mask(rng):
    out = softmax_rows(rng.normal(size=(4, 4)), causal_mask_from=1)
    np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)
    assert np.all(out[np.triu_indices(4, k=1)] == 0.0)
    assert np.all(out >= 0)


def test_softmax_fully_masked_row_is_rejected():
    with pytest.raises(ValueError):
        softmax_rows(np.zeros((2, 2)), causal_mask_from=0)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_rows([[np.nan, 1.0]])


@settings(max_examples=50, derandomize=True)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_softmax_rows_are_distributions(rows, cols, seed):
    m = seeded_random_matrix(rows, cols, seed, scale=5.0)
    out = softmax_rows(m)
    np.testing.assert_allclose(out.sum(axis=1), np.ones(rows), atol=1e-12)
    assert np.all(out >= 0)


def test_avg_pool_kernel_one_is_identity():
    v = [3.0, -1.0, 2.5]
    np.testing.assert_array_equal(avg_pool_1d(v, 1), v)


def test_avg_pool_truncates_boundaries():
    np.testing.assert_allclose(avg_pool_1d([1, 2, 3, 4, 5], 3), [1.5, 2.0, 3.0, 4.0, 4.5])


def test_avg_pool_constant_sequence_unchanged():
    np.testing.assert_allclose(avg_pool_1d([2.0] * 9, 5), [2.0] * 9)


@pytest.mark.parametrize("kernel", [0, 2, 4, -1])
def test_avg_pool_rejects_even_or_zero_kernel(kernel):
    with pytest.raises(ValueError):
        avg_pool_1d([1.0, 2.0], kernel)


def test_frobenius_norm_examples(rng):
    assert frobenius_norm(np.zeros((3, 3))) == 0.0
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    m = rng.normal(size=(6, 6))
    brute = sum(float(x) ** 2 for x in m.reshape(-1)) ** 0.5
    assert frobenius_norm(m) == pytest.approx(brute, rel=1e-12)


def test_seeded_random_matrix_determinism():
    a = seeded_random_matrix(4, 4, seed=7, scale=0.5)
    np.testing.assert_array_equal(a, seeded_random_matrix(4, 4, seed=7, scale=0.5))
    assert not np.array_equal(a, seeded_random_matrix(4, 4, seed=8, scale=0.5))


def test_seeded_random_matrix_scale():
    m = seeded_random_matrix(128, 128, seed=0, scale=1 / np.sqrt(16))
    assert abs(m.std() - 0.25) < 0.05
    assert np.abs(m).max() <= np.sqrt(3) * 0.25


def test_seeded_random_matrix_rejects_bad_scale():
    with pytest.raises(ValueError):
        seeded_random_matrix(2, 2, seed=0, scale=0.0)


def test_cosine_similarity():
    assert cosine_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)
    assert cosine_similarity([0.0, 0.0], [1.0, 1.0]) == 0.0


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)


shapes = st.integers(min_value=1, max_value=5)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


@settings(max_examples=50, derandomize=True)
@given(shapes, shapes, shapes, shapes, seeds)
def test_matmul_is_associative(n, k, m, p, seed):
    a = seeded_random_matrix(n, k, seed, scale=1.0)
    b = seeded_random_matrix(k, m, seed + 1, scale=1.0)
    c = seeded_random_matrix(m, p, seed + 2, scale=1.0)
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-9, atol=1e-12)


@settings(max_examples=50, derandomize=True)
@given(shapes, shapes, seeds, st.floats(min_value=-1e3, max_value=1e3))
def test_softmax_ignores_row_constants(rows, cols, seed, shift):
    m = seeded_random_matrix(rows, cols, seed, scale=5.0)
    offsets = shift * np.arange(1, rows + 1)[:, None]
    np.testing.assert_allclose(softmax_rows(m + offsets), softmax_rows(m), rtol=1e-9, atol=1e-12)


def test_softmax_row_constants_with_causal_mask(rng):
    m = rng.normal(size=(5, 5))
    shifted = m + np.array([[-40.0], [3.0], [0.5], [100.0], [-7.0]])
    np.testing.assert_allclose(
        softmax_rows(shifted, causal_mask_from=1), softmax_rows(m, causal_mask_from=1), atol=1e-12
    )


@settings(max_examples=50, derandomize=True)
@given(shapes, shapes, seeds)
def test_frobenius_triangle_inequality(rows, cols, seed):
    a = seeded_random_matrix(rows, cols, seed, scale=2.0)
    b = seeded_random_matrix(rows, cols, seed + 1, scale=0.5)
    assert frobenius_norm(a + b) <= frobenius_norm(a) + frobenius_norm(b) + 1e-12
    assert frobenius_norm(a - a) == 0.0
