"""Per-node penalized regressions in Gram form.

Every routine scores a node ``k`` regressed on a parent set ``p`` as

    (1/n) * ||X_k - X_p b||^2 + penalty(b)

using only ``S = X^T X``, so the cost does not depend on ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.optimize import lsq_linear

COND_LIMIT = 1e12


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NodeFit:
    value: float
    parents: tuple
    beta: tuple


def node_loss(S, n, k, parents, b) -> float:
    p = list(parents)
    if not p:
        return float(S[k, k]) / n
    b = np.asarray(b, dtype=float)
    G = S[np.ix_(p, p)]
    s = S[p, k]
    return float(S[k, k] - 2.0 * b @ s + b @ G @ b) / n


def ols_coefficients(S, k, parents) -> np.ndarray:
    """Normal-equation solve with a tiny ridge when the block is ill-conditioned."""
    p = list(parents)
    if not p:
        return np.zeros(0)
    G = S[np.ix_(p, p)]
    s = S[p, k]
    if np.linalg.cond(G) > COND_LIMIT:
        G = G + 1e-10 * np.trace(G) / len(p) * np.eye(len(p))
        if np.linalg.cond(G) > 1e15:
            raise SingularSystem(f"Gram block for node {k} is singular")
    return np.linalg.solve(G, s)


def bounded_lstsq(S, k, parents, bound) -> np.ndarray:
    """Least squares with every coefficient in [-bound, bound]."""
    p = list(parents)
    b = ols_coefficients(S, k, p)
    if bound is None or np.all(np.abs(b) <= bound):
        return b
    G = S[np.ix_(p, p)]
    s = S[p, k]
    ridge = 1e-12 * max(np.trace(G), 1.0)
    R = np.linalg.cholesky(G + ridge * np.eye(len(p))).T
    rhs = np.linalg.solve(R.T, s)
    res = lsq_linear(R, rhs, bounds=(-bound, bound), method="bvls", tol=1e-14)
    return np.clip(res.x, -bound, bound)


def best_subset(S, n, k, candidates, lam, forced=(), bound=None,
                max_candidates=20) -> NodeFit:
    """Exact l0 fit: minimize loss + lam * |parents| over subsets of ``candidates``.

    ``forced`` parents are always included (and always paid for).
    """
    forced = tuple(sorted(forced))
    free = [j for j in sorted(candidates) if j not in forced]
    if len(free) > max_candidates:
        raise ValueError(f"{len(free)} free candidates exceeds enumeration cap")
    best = None
    for r in range(len(free) + 1):
        # adding a parent can lower the loss by at most the current loss
        if best is not None and lam * (len(forced) + r) >= best.value:
            break
        for extra in combinations(free, r):
            p = tuple(sorted(forced + extra))
            b = bounded_lstsq(S, k, p, bound)
            val = node_loss(S, n, k, p, b) + lam * len(p)
            if best is None or val < best.value - 1e-15:
                best = NodeFit(val, p, tuple(b))
    return best


def lasso_gap(S, n, k, parents, b, lam) -> float:
    """Duality gap of the l1 node problem at ``b`` (unbounded case)."""
    p = list(parents)
    if not p:
        return 0.0
    b = np.asarray(b, dtype=float)
    G = S[np.ix_(p, p)]
    s = S[p, k]
    c = S[k, k]
    alpha = n * lam / 2.0
    rss = c - 2.0 * b @ s + b @ G @ b
    primal = 0.5 * rss + alpha * np.abs(b).sum()
    corr = np.abs(s - G @ b).max()
    t = 1.0 if corr <= alpha or corr == 0.0 else alpha / corr
    yr = c - b @ s
    dual = 0.5 * c - 0.5 * (c - 2.0 * t * yr + t * t * rss)
    return max(0.0, 2.0 * (primal - dual) / n)


def lasso(S, n, k, candidates, lam, bound=None, gap_tol=1e-10,
          max_sweeps=100000, warm=None) -> NodeFit:
    """Coordinate-descent lasso; parents are the nonzero coefficients.

    Without a bound the stopping rule is the duality gap. With a box bound
    it is a vanishing coordinate change, which is exact for this separable
    constraint.
    """
    p = sorted(candidates)
    if not p:
        return NodeFit(float(S[k, k]) / n, (), ())
    if lam == 0.0 and bound is None:
        # no shrinkage: the duality gap is uninformative, OLS is exact
        b = ols_coefficients(S, k, p)
        keep = [(j, v) for j, v in zip(p, b) if v != 0.0]
        return NodeFit(node_loss(S, n, k, p, b), tuple(j for j, _ in keep),
                       tuple(float(v) for _, v in keep))
    G = S[np.ix_(p, p)]
    s = S[p, k]
    thr = n * lam / 2.0
    b = np.zeros(len(p)) if warm is None else np.array(warm, dtype=float)
    Gb = G @ b
    diag = np.diag(G).copy()
    for sweep in range(max_sweeps):
        delta = 0.0
        for j in range(len(p)):
            if diag[j] <= 0.0:
                continue
            r = s[j] - Gb[j] + diag[j] * b[j]
            new = np.sign(r) * max(abs(r) - thr, 0.0) / diag[j]
            if bound is not None:
                new = min(max(new, -bound), bound)
            d = new - b[j]
            if d != 0.0:
                Gb += d * G[:, j]
                b[j] = new
                delta = max(delta, abs(d))
        if bound is None:
            if sweep % 5 == 0 or delta == 0.0:
                if lasso_gap(S, n, k, p, b, lam) <= gap_tol:
                    break
        elif delta <= 1e-14:
            break
    val = node_loss(S, n, k, p, b) + lam * np.abs(b).sum()
    keep = [(j, v) for j, v in zip(p, b) if abs(v) > 1e-8]
    beta = tuple(v for _, v in keep)
    parents = tuple(j for j, _ in keep)
    return NodeFit(float(val), parents, beta)


def fit_node(S, n, k, candidates, lam, penalty, forced=(), bound=None) -> NodeFit:
    if penalty == "L0":
        return best_subset(S, n, k, candidates, lam, forced=forced, bound=bound)
    return lasso(S, n, k, candidates, lam, bound=bound)


class FitCache:
    """Memo of node fits keyed by (node, candidates, forced)."""

    def __init__(self, S, n, lam, penalty, bound=None):
        self.S, self.n, self.lam, self.penalty, self.bound = S, n, lam, penalty, bound
        self._memo = {}

    def __call__(self, k, candidates, forced=()) -> NodeFit:
        key = (k, frozenset(candidates), frozenset(forced))
        hit = self._memo.get(key)
        if hit is None:
            hit = fit_node(self.S, self.n, k, candidates, self.lam, self.penalty,
                           forced=forced, bound=self.bound)
            self._memo[key] = hit
        return hit
