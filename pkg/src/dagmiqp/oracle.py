"""Exact brute-force solvers and checkers for small instances.

Two independent exact routes for the DAG problem:

* :func:`enumerate_orderings` tries every node ordering and fits each node
  on its preceding neighbors;
* :func:`enumerate_arc_subsets` tries every acyclic arc subset.

Plus a reference QP solver that does not share code with :mod:`dagmiqp.qp`
and point maps between the LO, LN and TO relaxations.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, permutations

import numpy as np

from .graph import (Digraph, SuperStructure, WeightedDag, complete_to_tournament, find_cycle,
                    topological_order)
from .regression import FitCache, lasso, node_loss, ols_coefficients
from .sem import _as_gram, penalized_objective

ORDERING_CAP = 10
SUBSET_CAP = 20


class TooLarge(ValueError):
    pass


class InfeasibleInput(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    objective: float
    dag: WeightedDag
    ordering: tuple


def _dag_from(m, beta) -> WeightedDag:
    beta = {a: v for a, v in beta.items() if v != 0.0}
    return WeightedDag(Digraph(m, frozenset(beta)), beta)


def enumerate_orderings(data, ss: SuperStructure, lam: float, penalty: str,
                        bound=None) -> OracleResult:
    """Minimum over all m! orderings, permutations in lexicographic order."""
    m = ss.m
    if m > ORDERING_CAP:
        raise TooLarge(f"m={m} exceeds the ordering cap {ORDERING_CAP}")
    g = _as_gram(data)
    fits = FitCache(g.S, g.n, lam, penalty, bound=bound)
    nbr = [set(ss.neighbors(k)) for k in range(m)]
    nmask = [sum(1 << j for j in nbr[k]) for k in range(m)]
    score = {}

    def cost(k, before):
        key = (k, before & nmask[k])
        if key not in score:
            score[key] = fits(k, [j for j in range(m) if key[1] >> j & 1]).value
        return score[key]

    best_val, best_perm = np.inf, None
    for perm in permutations(range(m)):
        total, before = 0.0, 0
        for k in perm:
            total += cost(k, before)
            if total >= best_val:
                break
            before |= 1 << k
        if total < best_val:
            best_val, best_perm = total, perm
    beta = {}
    placed = []
    for k in best_perm:
        fit = fits(k, [j for j in placed if j in nbr[k]])
        for j, b in zip(fit.parents, fit.beta):
            beta[(j, k)] = b
        placed.append(k)
    return OracleResult(float(best_val), _dag_from(m, beta), tuple(best_perm))


def enumerate_arc_subsets(data, ss: SuperStructure, lam: float, penalty: str) -> OracleResult:
    """Minimum over every acyclic subset of the bidirected arc set."""
    arcs = ss.arcs
    if len(arcs) > SUBSET_CAP:
        raise TooLarge(f"{len(arcs)} arcs exceeds the subset cap {SUBSET_CAP}")
    g = _as_gram(data)
    m = ss.m
    memo = {}

    def node_value(k, parents):
        key = (k, parents)
        if key not in memo:
            if penalty == "L0":
                b = ols_coefficients(g.S, k, parents)
                memo[key] = (node_loss(g.S, g.n, k, parents, b) + lam * len(parents),
                             dict(zip(parents, b)))
            else:
                fit = lasso(g.S, g.n, k, parents, lam, gap_tol=1e-12)
                memo[key] = (fit.value, dict(zip(fit.parents, fit.beta)))
        return memo[key]

    best = (np.inf, None)
    for mask in range(1 << len(arcs)):
        chosen = [arcs[i] for i in range(len(arcs)) if mask >> i & 1]
        if find_cycle((m, chosen)) is not None:
            continue
        total = 0.0
        for k in range(m):
            total += node_value(k, tuple(sorted(j for j, kk in chosen if kk == k)))[0]
            if total >= best[0]:
                break
        if total < best[0]:
            best = (total, chosen)
    value, chosen = best
    beta = {}
    for k in range(m):
        pa = tuple(sorted(j for j, kk in chosen if kk == k))
        for j, b in node_value(k, pa)[1].items():
            beta[(j, k)] = b
    dag = _dag_from(m, beta)
    return OracleResult(float(value), dag, tuple(topological_order(dag.digraph)))


def tournament_completion_check(dag: WeightedDag, ss: SuperStructure, data, lam: float,
                                penalty: str) -> bool:
    """Complete ``dag`` to an acyclic tournament on ``ss`` with zero new weights."""
    if not dag.digraph.within(ss):
        return False
    full = complete_to_tournament(dag.digraph, ss)
    if find_cycle(full) is not None:
        return False
    for j, k in ss.sorted_edges():
        if ((j, k) in full.arcs) == ((k, j) in full.arcs):
            return False
    beta = {arc: dag.beta.get(arc, 0.0) for arc in full.arcs}
    g = {arc: int(arc in dag.beta) for arc in full.arcs}
    before = penalized_objective(dag.beta, {a: 1 for a in dag.beta}, lam, penalty, data)
    after = penalized_objective(beta, g, lam, penalty, data)
    return abs(before - after) <= 1e-12 * max(1.0, abs(before))


# -- relaxation point maps ------------------------------------------------------------

def lo_violation(w: dict, m: int) -> float:
    """Largest violation of the LO relaxation rows by a point on ordered pairs."""
    v = 0.0
    for j, k in combinations(range(m), 2):
        v = max(v, abs(w[(j, k)] + w[(k, j)] - 1.0))
    for a in w.values():
        v = max(v, -a, a - 1.0)
    for i, j, k in combinations(range(m), 3):
        for a, b, c in ((i, j, k), (i, k, j)):
            v = max(v, w[(a, b)] + w[(b, c)] + w[(c, a)] - 2.0)
    return v


def ln_violation(z: dict, psi, ss: SuperStructure) -> float:
    """Largest violation of the LN ordering rows (z, psi part of the relaxation)."""
    m = ss.m
    v = 0.0
    for j, k in ss.sorted_edges():
        v = max(v, abs(z[(j, k)] + z[(k, j)] - 1.0))
    for arc in ss.arcs:
        j, k = arc
        v = max(v, -z[arc], z[arc] - 1.0)
        v = max(v, z[(j, k)] - (m - 1) * z[(k, j)] - (psi[k] - psi[j]))
    for p in psi:
        v = max(v, 1.0 - p, p - m)
    return v


def map_lo_point_to_ln(w: dict, beta: dict, ss: SuperStructure, tol: float = 1e-9):
    """z = w on the arc set, psi_j = 1 + sum_l w_lj; beta passes through."""
    m = ss.m
    if lo_violation(w, m) > tol:
        raise InfeasibleInput("w violates the LO relaxation")
    z = {arc: w[arc] for arc in ss.arcs}
    psi = [1.0 + sum(w[(l, j)] for l in range(m) if l != j) for j in range(m)]
    return z, psi, dict(beta)


def map_to_point_to_ln(z: dict, o: np.ndarray):
    """psi_k = sum_s s * o_ks with 1-based positions s."""
    m = o.shape[0]
    psi = [float(sum((s + 1) * o[k, s] for s in range(m))) for k in range(m)]
    return dict(z), psi


def max_triangle_sum(z: dict, m: int) -> float:
    """Largest directed 3-cycle sum of a pairwise point (LO needs <= 2)."""
    best = -np.inf
    for i, j, k in combinations(range(m), 3):
        for a, b, c in ((i, j, k), (i, k, j)):
            best = max(best, z[(a, b)] + z[(b, c)] + z[(c, a)])
    return best


def appendix_witness(eps: float = 0.1):
    """The m=3 point of the strict-containment argument (0-based arcs)."""
    z = {(0, 2): 1.0, (2, 0): 0.0, (2, 1): 0.5 + eps, (1, 2): 0.5 - eps,
         (0, 1): 0.5, (1, 0): 0.5}
    return z, [1.0, 2.0, 2.0]


def four_node_witness():
    """An m=4 LN-feasible point whose pairwise values admit no LO point.

    All layers equal; the 3-cycle 0 -> 1 -> 2 -> 0 carries 3/4 on each arc,
    every other pair 1/2. The cycle sums to 9/4 > 2.
    """
    m = 4
    z = {}
    for j, k in combinations(range(m), 2):
        z[(j, k)] = z[(k, j)] = 0.5
    for a, b in ((0, 1), (1, 2), (2, 0)):
        z[(a, b)], z[(b, a)] = 0.75, 0.25
    return z, [2.0] * m


def sample_lo_points(m: int, count: int, seed=0):
    """LO-relaxation points: LP vertices under random objectives mixed with the center."""
    from scipy.optimize import linprog

    from .sem import rng_for

    rng = rng_for(seed)
    pairs = list(combinations(range(m), 2))
    idx = {p: i for i, p in enumerate(pairs)}

    def w_of(v, a, b):
        return v[idx[(a, b)]] if a < b else 1.0 - v[idx[(b, a)]]

    rows, rhs = [], []
    for i, j, k in combinations(range(m), 3):
        for a, b, c in ((i, j, k), (i, k, j)):
            coef = np.zeros(len(pairs))
            const = 0.0
            for s, t in ((a, b), (b, c), (c, a)):
                if s < t:
                    coef[idx[(s, t)]] += 1.0
                else:
                    coef[idx[(t, s)]] -= 1.0
                    const += 1.0
            rows.append(coef)
            rhs.append(2.0 - const)
    A = np.array(rows) if rows else None
    b = np.array(rhs) if rows else None
    out = []
    for _ in range(count):
        res = linprog(rng.standard_normal(len(pairs)), A_ub=A, b_ub=b,
                      bounds=[(0.0, 1.0)] * len(pairs), method="highs")
        t = rng.random()
        v = t * res.x + (1.0 - t) * 0.5
        w = {}
        for a in range(m):
            for c in range(m):
                if a != c:
                    w[(a, c)] = float(w_of(v, a, c))
        out.append(w)
    return out


# -- reference QP -----------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceQp:
    x: np.ndarray
    objective: float
    active: tuple
    kkt_residual: float


def reference_qp(P, q, A, l, u, lb, ub, const=0.0) -> ReferenceQp:
    """Interior point for the active set, then an exact solve on that face.

    The face solve uses a null-space reduction; the result is certified by
    sign-correct multipliers from nonnegative least squares.
    """
    import clarabel
    import scipy.sparse as sp
    from scipy.linalg import null_space
    from scipy.optimize import lsq_linear

    P = np.asarray(P.toarray() if hasattr(P, "toarray") else P, float)
    A = np.asarray(A.toarray() if hasattr(A, "toarray") else A, float)
    n = len(q)
    G_rows, h = [], []
    for i in range(A.shape[0]):
        if np.isfinite(u[i]):
            G_rows.append(A[i])
            h.append(u[i])
        if np.isfinite(l[i]):
            G_rows.append(-A[i])
            h.append(-l[i])
    eye = np.eye(n)
    for j in range(n):
        G_rows.append(eye[j])
        h.append(ub[j])
        G_rows.append(-eye[j])
        h.append(-lb[j])
    G = np.array(G_rows)
    h = np.array(h)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = 1e-12
    settings.tol_feas = 1e-12
    settings.max_iter = 400
    sol = clarabel.DefaultSolver(sp.csc_matrix(np.triu(P)), np.asarray(q, float),
                                 sp.csc_matrix(G), h, [clarabel.NonnegativeConeT(len(h))],
                                 settings).solve()
    x_ip = np.asarray(sol.x, float)
    best = None
    z_ip = np.asarray(sol.z, float)
    slack = h - G @ x_ip
    for thr in (1e-7, 1e-6, 1e-8, 1e-5, 1e-4):
        act = np.flatnonzero((slack <= thr * (1.0 + np.abs(h))) | ((z_ip > slack) & (z_ip > thr)))
        Ga, ha = G[act], h[act]
        if len(act):
            # project the interior point onto the face so flat directions stay put
            dx, *_ = np.linalg.lstsq(Ga, ha - Ga @ x_ip, rcond=None)
            x0 = x_ip + dx
            Z = null_space(Ga)
        else:
            x0, Z = x_ip, np.eye(n)
        if Z.shape[1]:
            H = Z.T @ P @ Z
            rhs = -Z.T @ (P @ x0 + q)
            w, *_ = np.linalg.lstsq(H, rhs, rcond=None)
            x = x0 + Z @ w
        else:
            x = x0
        if np.max(G @ x - h, initial=0.0) > 1e-9:
            continue
        grad = P @ x + q
        if len(act):
            mult = lsq_linear(Ga.T, -grad, bounds=(0.0, np.inf), method="bvls", tol=1e-15).x
            res = np.max(np.abs(grad + Ga.T @ mult))
        else:
            res = np.max(np.abs(grad))
        if best is None or res < best.kkt_residual:
            obj = float(0.5 * x @ P @ x + q @ x + const)
            best = ReferenceQp(x, obj, tuple(int(i) for i in act), float(res))
    if best is None:
        x = x_ip
        best = ReferenceQp(x, float(0.5 * x @ P @ x + q @ x + const), (), np.inf)
    return best
