import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scnfusion.features import SubjectFeatures
from scnfusion.scn import (
    ALPHA,
    DegenerateSubjectError,
    blend,
    build_scn_batch,
    build_scn_tensor,
    group_covariance,
    individual_scn,
)


def brute_pearson(F):
    F = np.asarray(F, dtype=float)
    n, r = F.shape
    C = np.empty((r, r))
    for i, j in itertools.product(range(r), repeat=2):
        a, b = F[:, i], F[:, j]
        ma, mb = sum(a) / n, sum(b) / n
        cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
        va = sum((x - ma) ** 2 for x in a)
        vb = sum((y - mb) ** 2 for y in b)
        C[i, j] = cov / np.sqrt(va * vb)
    return C


def test_hand_matrix_against_brute_force():
    F = np.array([[1.0, 2.0, 0.5], [2.0, 1.0, 0.7], [3.0, 4.0, 0.2], [4.0, 3.0, 0.9]])
    np.testing.assert_allclose(group_covariance(F), brute_pearson(F), atol=1e-12)


def test_perfect_and_anti_correlation():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    C = group_covariance(np.column_stack([x, 3 * x + 1, -x]))
    assert C[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert C[0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_zero_variance_column():
    F = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(group_covariance(F), np.eye(2))


def test_needs_two_subjects():
    with pytest.raises(ValueError):
        group_covariance(np.ones((1, 3)))


def test_spearman_option():
    F = np.array([[1.0, 1.0], [2.0, 8.0], [3.0, 27.0], [4.0, 64.0]])
    assert group_covariance(F, "spearman")[0, 1] == pytest.approx(1.0)
    assert group_covariance(F)[0, 1] < 1.0


def test_individual_hand_example():
    np.testing.assert_allclose(individual_scn([3.0, 4.0]), [[0.36, 0.48], [0.48, 0.64]], atol=1e-15)
    e1 = individual_scn([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(e1, np.diag([1.0, 0, 0]))
    with pytest.raises(DegenerateSubjectError):
        individual_scn(np.zeros(3))


def test_blend_hand_example_and_endpoints():
    C = np.array([[1.0, -0.2], [-0.2, 1.0]])
    I = individual_scn([3.0, 4.0])
    expected = np.array([[0.55 + 0.45 * 0.36, -0.11 + 0.45 * 0.48], [-0.11 + 0.45 * 0.48, 0.55 + 0.45 * 0.64]])
    np.testing.assert_allclose(blend(C, I, 0.55), expected, atol=1e-15)
    assert ALPHA == 0.55
    g = blend(C, I, 1.0)
    assert np.array_equal(g, C) and g is not C
    assert np.array_equal(blend(C, I, 0.0), I)
    with pytest.raises(ValueError):
        blend(C, I, 1.5)


vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(0.01, 10))


@settings(max_examples=80, deadline=None)
@given(vectors, st.floats(0.1, 100))
def test_individual_invariants(f, c):
    M = individual_scn(f)
    assert np.trace(M) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(M, M.T, atol=1e-12)
    w = np.linalg.eigvalsh(M)
    assert w.min() > -1e-9
    assert np.sum(w > 1e-9) == 1
    np.testing.assert_allclose(individual_scn(c * f), M, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 10), st.integers(2, 8), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**31))
def test_blend_invariants(n, r, a1, a2, seed):
    rng = np.random.default_rng(seed)
    F = rng.uniform(0.1, 1.0, (n, r))
    C = group_covariance(F)
    assert np.all(np.abs(C) <= 1) and np.all(np.diag(C) == 1)
    assert np.linalg.eigvalsh(C).min() > -1e-8
    f = F[0]
    I = individual_scn(f)
    B = blend(C, I, a1)
    np.testing.assert_allclose(np.diag(B), a1 + (1 - a1) * f**2 / np.sum(f**2), atol=1e-9)
    assert np.linalg.eigvalsh(B).min() > -1e-8
    np.testing.assert_allclose(blend(C, I, a1) + blend(C, I, a2), 2 * blend(C, I, (a1 + a2) / 2), atol=1e-12)


def test_tensor_shape_symmetry_and_identical_channels(rng):
    F = rng.uniform(0.1, 1, (10, 116))
    C = group_covariance(F)
    s = SubjectFeatures("s", 0, F[0], F[0], np.zeros(3))
    T = build_scn_tensor(s, C, C)
    assert T.shape == (2, 116, 116)
    np.testing.assert_array_equal(T[0], T[1])
    np.testing.assert_allclose(T, T.transpose(0, 2, 1), atol=1e-12)


def test_batch_matches_single(rng):
    M = rng.uniform(0.1, 1, (5, 7))
    Q = rng.uniform(0.1, 1, (5, 7))
    Cm, Cq = group_covariance(M), group_covariance(Q)
    batch = build_scn_batch(M, Q, Cm, Cq, 0.3)
    for i in range(5):
        single = build_scn_tensor(SubjectFeatures("s", 0, M[i], Q[i], np.zeros(3)), Cm, Cq, 0.3)
        np.testing.assert_allclose(batch[i], single, atol=1e-14)
    Q[2] = 0
    with pytest.raises(DegenerateSubjectError):
        build_scn_batch(M, Q, Cm, Cq)
