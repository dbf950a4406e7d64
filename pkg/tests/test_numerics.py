import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eltrack.numerics import (DimensionError, DivergenceError, NotPositiveDefiniteError, balance,
                              chol_pd, eigenvalues, max_real_eig, rk4_integrate, solve_spd)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def square(n):
    return arrays(float, (n, n), elements=finite)


@pytest.mark.parametrize("m, expected", [
    (np.eye(2), True),
    ([[1, 2], [2, 1]], False),
    ([[4, 0], [0, 9]], True),
])
def test_chol_pd_examples(m, expected):
    assert chol_pd(m, 1e-12) is expected


def test_chol_pd_rejects_bad_input():
    with pytest.raises(DimensionError):
        chol_pd(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        chol_pd([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(DimensionError):
        chol_pd([[1.0, np.nan], [np.nan, 1.0]])


@given(st.integers(1, 6).flatmap(square))
def test_chol_pd_agrees_with_eigenvalues(M):
    S = M @ M.T + np.diag(np.linspace(-3, 3, M.shape[0]))
    lam = np.linalg.eigvalsh(S).min()
    if abs(lam) < 1e-6 * max(1.0, np.abs(S).max()):
        return  # too close to the boundary to decide either way
    assert chol_pd(S, 1e-12) == (lam > 0)


def test_chol_pd_semidefinite():
    v = np.array([1.0, -2.0, 0.5])
    assert chol_pd(np.outer(v, v), 1e-12, semidefinite=True)
    assert not chol_pd(np.outer(v, v), 1e-12)
    assert not chol_pd(-np.outer(v, v), 1e-12, semidefinite=True)


def test_chol_pd_scaled_resolves_wide_range():
    d = np.array([1e-20, 1.0, 1e20])
    S = np.diag(d)
    S[0, 1] = S[1, 0] = 0.5e-10
    assert chol_pd(S, 1e-12, scaled=True)
    S[0, 1] = S[1, 0] = 2e-10
    assert not chol_pd(S, 1e-12, scaled=True)


@pytest.mark.parametrize("m, expected", [
    ([[0, 1], [-1, -1]], -0.5),
    ([[0, 1], [1, 0]], 1.0),
    (np.diag([-1.0, -2.0]), -1.0),
])
def test_max_real_eig_examples(m, expected):
    assert max_real_eig(m) == pytest.approx(expected, abs=1e-12)


@given(st.integers(1, 8).flatmap(square))
def test_eigenvalues_match_numpy(M):
    ours = np.sort_complex(eigenvalues(M))
    ref = np.sort_complex(np.linalg.eigvals(M))
    scale = max(1.0, np.abs(M).max())
    # compare as multisets via greedy matching
    ref = list(ref)
    for z in ours:
        j = int(np.argmin([abs(z - w) for w in ref]))
        assert abs(z - ref[j]) <= 1e-6 * scale
        ref.pop(j)


def test_eigenvalues_badly_scaled():
    rng = np.random.default_rng(3)
    D = np.diag(10.0 ** rng.uniform(-8, 8, 6))
    M = D @ rng.normal(size=(6, 6)) @ np.linalg.inv(D)
    ours = np.sort(np.abs(eigenvalues(M)))
    ref = np.sort(np.abs(np.linalg.eigvals(M)))
    assert np.allclose(ours, ref, rtol=1e-9)


def test_balance_is_similarity():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(5, 5)) * np.outer(10.0 ** rng.uniform(-5, 5, 5), np.ones(5))
    B, d = balance(M)
    assert np.allclose(B, M * (1 / d)[:, None] * d[None, :], rtol=0, atol=1e-9 * np.abs(M).max())
    assert np.all(np.log2(d) == np.round(np.log2(d)))


@pytest.mark.parametrize("m, b, x", [
    (np.eye(2), [3, 4], [3, 4]),
    (np.diag([2.0, 4.0]), [2, 4], [1, 1]),
    ([[2, 1], [1, 2]], [3, 3], [1, 1]),
])
def test_solve_spd_examples(m, b, x):
    assert np.allclose(solve_spd(m, b), x, atol=1e-14)


def test_solve_spd_errors():
    with pytest.raises(NotPositiveDefiniteError):
        solve_spd([[1, 2], [2, 1]], [1, 1])
    with pytest.raises(DimensionError):
        solve_spd(np.eye(2), [1, 2, 3])


@given(st.integers(1, 6).flatmap(square), st.integers(0, 10 ** 6))
def test_solve_spd_residual(M, seed):
    S = M @ M.T + np.eye(M.shape[0])
    b = np.random.default_rng(seed).normal(size=M.shape[0])
    y = solve_spd(S, b)
    assert np.linalg.norm(S @ y - b) <= 1e-9 * np.linalg.norm(S, 2) * (1 + np.linalg.norm(y))


def test_rk4_exponential_decay():
    t, X = rk4_integrate(lambda t, x: -x, [1.0], 0.0, 1.0, 1e-3)
    assert t[-1] == 1.0
    assert abs(X[-1, 0] - math.exp(-1)) < 1e-9


def test_rk4_constant_is_exact():
    t, X = rk4_integrate(lambda t, x: np.zeros_like(x), [5.0], 0.0, 3.0, 0.1)
    assert X[-1, 0] == 5.0


def test_rk4_harmonic_period():
    t, X = rk4_integrate(lambda t, x: np.array([x[1], -x[0]]), [1.0, 0.0], 0.0, 2 * np.pi, 1e-3)
    assert np.allclose(X[-1], [1.0, 0.0], atol=1e-8)


def test_rk4_fourth_order():
    f = lambda t, x: np.array([x[1], -x[0]])
    err = [abs(rk4_integrate(f, [1.0, 0.0], 0.0, 5.0, h)[1][-1, 0] - math.cos(5.0)) for h in (0.1, 0.05)]
    assert 12 < err[0] / err[1] < 20


def test_rk4_divergence_marker():
    with pytest.raises(DivergenceError) as exc, np.errstate(over="ignore"):
        rk4_integrate(lambda t, x: x ** 2, [1.0], 0.0, 2.0, 1e-2)
    assert 0.9 < exc.value.t_blowup < 1.2
