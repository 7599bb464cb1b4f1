"""Exact l1 DAG search: A* over sets of already-ordered nodes.

A state is the set S of nodes placed first in the ordering. Moving from S
to S | {k} costs the lasso score of k with parents drawn from S, so a
shortest path from the empty set to V is an optimal ordering. The
heuristic lets every remaining node pick parents from its whole
neighborhood, which ignores acyclicity and therefore never overestimates.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import Digraph, SuperStructure, WeightedDag
from .regression import lasso, ols_coefficients
from .sem import _as_gram

MAX_NODES = 25


class FrontierOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchState:
    included: int
    g_cost: float
    h_cost: float
    parent_state: Optional[int] = None
    last_node: Optional[int] = None

    @property
    def f_cost(self) -> float:
        return self.g_cost + self.h_cost


@dataclass(frozen=True)
class AstarResult:
    objective: float
    dag: WeightedDag
    stats: dict


def best_score(k: int, allowed, data, lam: float):
    """Lasso of node ``k`` on ``allowed``: (score, parents, beta).

    The score is (1/n)||X_k - X_P b||^2 + lam * |b|_1.
    """
    gram = _as_gram(data)
    S, n = gram.S, gram.n
    allowed = sorted(allowed)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if not allowed:
        return float(S[k, k]) / n, (), np.zeros(0)
    if lam == 0.0:
        b = ols_coefficients(S, k, allowed)
        s = S[allowed, k]
        G = S[np.ix_(allowed, allowed)]
        score = float(S[k, k] - 2.0 * b @ s + b @ G @ b) / n
        keep = [i for i, v in enumerate(b) if v != 0.0]
        return score, tuple(allowed[i] for i in keep), b[keep]
    fit = lasso(S, n, k, allowed, lam, gap_tol=1e-10)
    return fit.value, fit.parents, np.asarray(fit.beta, dtype=float)


class _Scores:
    def __init__(self, gram, ss: SuperStructure, lam: float):
        self.gram, self.lam = gram, lam
        self.ne_mask = [sum(1 << j for j in ss.neighbors(k)) for k in range(ss.m)]
        self._memo = {}

    def __call__(self, k: int, mask: int):
        key = (k, mask & self.ne_mask[k])
        hit = self._memo.get(key)
        if hit is None:
            allowed = [j for j in range(self.gram.m) if key[1] >> j & 1]
            hit = best_score(k, allowed, self.gram, self.lam)
            self._memo[key] = hit
        return hit


def astar_lasso(data, ss: SuperStructure, lam: float, max_states: int = 5_000_000):
    """Optimal l1-penalized DAG restricted to ``ss``.

    Returns ``(objective, WeightedDag, stats)`` with stats keys
    ``states_expanded`` and ``peak_frontier``.
    """
    m = ss.m
    if m > MAX_NODES:
        raise ValueError(f"A* is limited to {MAX_NODES} nodes, got {m}")
    gram = _as_gram(data)
    if gram.m != m:
        raise ValueError("data and super-structure disagree on m")
    scores = _Scores(gram, ss, lam)
    full = (1 << m) - 1
    h_node = [scores(k, full)[0] for k in range(m)]

    def h(mask):
        return sum(h_node[k] for k in range(m) if not mask >> k & 1)

    best_g = {0: 0.0}
    came = {0: None}
    start = SearchState(0, 0.0, h(0))
    heap = [(start.f_cost, 0, 0, start)]
    closed = set()
    expanded = peak = 0
    while heap:
        peak = max(peak, len(heap))
        _, _, mask, st = heapq.heappop(heap)
        if mask in closed or st.g_cost > best_g[mask] + 1e-12:
            continue
        if mask == full:
            break
        closed.add(mask)
        expanded += 1
        for k in range(m):
            if mask >> k & 1:
                continue
            nxt = mask | 1 << k
            g = st.g_cost + scores(k, mask)[0]
            if nxt in closed or g >= best_g.get(nxt, np.inf) - 1e-12:
                continue
            best_g[nxt] = g
            came[nxt] = (mask, k)
            child = SearchState(nxt, g, h(nxt), mask, k)
            # deeper states first on ties, then the bitmask
            heapq.heappush(heap, (child.f_cost, -bin(nxt).count("1"), nxt, child))
        if len(heap) > max_states:
            raise FrontierOverflow(f"frontier exceeded {max_states} states")
    order = []
    mask = full
    while came[mask] is not None:
        mask, k = came[mask]
        order.append(k)
    order.reverse()
    beta = {}
    placed = 0
    for k in order:
        _, parents, b = scores(k, placed)
        for j, v in zip(parents, b):
            beta[(j, k)] = float(v)
        placed |= 1 << k
    dag = WeightedDag(Digraph(m, frozenset(beta)), beta)
    stats = {"states_expanded": expanded, "peak_frontier": peak}
    return best_g[full], dag, stats
