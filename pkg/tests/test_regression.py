from itertools import combinations

import numpy as np
import pytest
from scipy.optimize import minimize

from dagmiqp.regression import (FitCache, best_subset, bounded_lstsq, lasso, lasso_gap,
                                node_loss, ols_coefficients)


def gram(seed, n=60, m=5):
    X = np.random.default_rng(seed).standard_normal((n, m))
    X[:, 0] += 0.8 * X[:, 1] - 0.5 * X[:, 2]
    return X.T @ X, n


@pytest.mark.parametrize("seed", range(5))
def test_ols_matches_lstsq(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 4))
    S = X.T @ X
    b = ols_coefficients(S, 0, [1, 2, 3])
    ref, *_ = np.linalg.lstsq(X[:, 1:], X[:, 0], rcond=None)
    assert np.allclose(b, ref, atol=1e-10)
    assert node_loss(S, 40, 0, [1, 2, 3], b) == pytest.approx(
        np.sum((X[:, 0] - X[:, 1:] @ ref) ** 2) / 40, rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_best_subset_is_exhaustive_minimum(seed):
    S, n = gram(seed)
    lam = 0.05
    fit = best_subset(S, n, 0, [1, 2, 3, 4], lam)
    best = min(node_loss(S, n, 0, p, ols_coefficients(S, 0, p)) + lam * len(p)
               for r in range(5) for p in combinations([1, 2, 3, 4], r))
    assert fit.value == pytest.approx(best, rel=1e-12)


def test_best_subset_forced_and_bounded():
    S, n = gram(0)
    fit = best_subset(S, n, 0, [1, 2, 3], 100.0, forced=(3,))
    assert fit.parents == (3,)
    bounded = best_subset(S, n, 0, [1, 2], 0.0, bound=0.1)
    assert max(abs(v) for v in bounded.beta) <= 0.1 + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_lasso_matches_generic_minimizer(seed):
    S, n = gram(seed)
    lam = 0.2
    p = [1, 2, 3, 4]
    fit = lasso(S, n, 0, p, lam, gap_tol=1e-12)

    def f(b):
        return node_loss(S, n, 0, p, b) + lam * np.abs(b).sum()

    # split b = u - v with u, v >= 0 gives a smooth bound-constrained problem
    res = minimize(lambda z: f(z[:4] - z[4:]), np.zeros(8), bounds=[(0, None)] * 8,
                   method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
    assert fit.value <= res.fun + 1e-8
    assert fit.value == pytest.approx(res.fun, abs=1e-7)


def test_lasso_shrinks_to_empty_and_zero_lam_is_ols():
    S, n = gram(2)
    assert lasso(S, n, 0, [1, 2], 1e6).parents == ()
    fit = lasso(S, n, 0, [1, 2], 0.0)
    assert np.allclose(fit.beta, ols_coefficients(S, 0, [1, 2]))


def test_lasso_gap_vanishes_at_optimum():
    S, n = gram(3)
    fit = lasso(S, n, 0, [1, 2, 3, 4], 0.1, gap_tol=1e-13)
    full = np.zeros(4)
    for j, v in zip(fit.parents, fit.beta):
        full[j - 1] = v
    assert lasso_gap(S, n, 0, [1, 2, 3, 4], full, 0.1) <= 1e-12
    assert lasso_gap(S, n, 0, [1, 2, 3, 4], np.zeros(4), 0.1) > 1e-3


def test_bounded_lstsq_respects_box():
    S, n = gram(4)
    b = bounded_lstsq(S, 0, [1, 2], 0.2)
    assert np.all(np.abs(b) <= 0.2)
    # equals a brute force clip search on a fine grid within tolerance
    grid = np.linspace(-0.2, 0.2, 201)
    vals = [[node_loss(S, n, 0, [1, 2], [u, v]) for v in grid] for u in grid]
    assert node_loss(S, n, 0, [1, 2], b) <= np.min(vals) + 1e-12


def test_fit_cache_memoizes():
    S, n = gram(5)
    cache = FitCache(S, n, 0.1, "L0")
    a = cache(0, [1, 2, 3])
    assert cache(0, (3, 2, 1)) is a
