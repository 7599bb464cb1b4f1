"""Graph types, acyclicity machinery and structure-recovery metrics.

Nodes are 0-based integers everywhere in the library. The text formats
(see :func:`read_superstructure`) are 1-based.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

Arc = tuple[int, int]


class CyclicInput(ValueError):
    """Raised when an operation that needs a DAG receives a cyclic digraph."""


class EmptyTruth(ValueError):
    """Raised when the true graph has no arcs, so TPR is undefined."""


def _edge(j: int, k: int) -> tuple[int, int]:
    return (j, k) if j < k else (k, j)


@dataclass(frozen=True)
class SuperStructure:
    """Undirected candidate-edge graph on ``m`` nodes."""

    m: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        clean = set()
        for j, k in self.edges:
            j, k = int(j), int(k)
            if j == k:
                raise ValueError(f"self-loop on node {j}")
            if not (0 <= j < self.m and 0 <= k < self.m):
                raise ValueError(f"edge ({j}, {k}) outside 0..{self.m - 1}")
            clean.add(_edge(j, k))
        object.__setattr__(self, "edges", frozenset(clean))

    @property
    def arcs(self) -> list[Arc]:
        """The bidirected arc set, sorted."""
        out = []
        for j, k in self.edges:
            out.append((j, k))
            out.append((k, j))
        return sorted(out)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def neighbors(self, k: int) -> list[int]:
        return sorted({j for e in self.edges if k in e for j in e if j != k})

    def has_edge(self, j: int, k: int) -> bool:
        return _edge(j, k) in self.edges

    @property
    def is_complete(self) -> bool:
        return len(self.edges) == self.m * (self.m - 1) // 2


@dataclass(frozen=True)
class Digraph:
    """Directed graph on ``m`` nodes without self-loops."""

    m: int
    arcs: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        clean = set()
        for j, k in self.arcs:
            j, k = int(j), int(k)
            if j == k:
                raise ValueError(f"self-loop on node {j}")
            if not (0 <= j < self.m and 0 <= k < self.m):
                raise ValueError(f"arc ({j}, {k}) outside 0..{self.m - 1}")
            clean.add((j, k))
        object.__setattr__(self, "arcs", frozenset(clean))

    def parents(self, k: int) -> list[int]:
        return sorted(j for j, kk in self.arcs if kk == k)

    def children(self, j: int) -> list[int]:
        return sorted(k for jj, k in self.arcs if jj == j)

    def skeleton(self) -> SuperStructure:
        return SuperStructure(self.m, frozenset(_edge(j, k) for j, k in self.arcs))

    def within(self, ss: SuperStructure) -> bool:
        return all(ss.has_edge(j, k) for j, k in self.arcs)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.m, self.m), dtype=int)
        for j, k in self.arcs:
            A[j, k] = 1
        return A


@dataclass(frozen=True)
class WeightedDag:
    """A DAG with a nonzero real coefficient on every arc."""

    digraph: Digraph
    beta: Mapping[Arc, float]

    def __post_init__(self):
        beta = {(int(j), int(k)): float(v) for (j, k), v in self.beta.items()}
        if set(beta) != set(self.digraph.arcs):
            raise ValueError("beta keys must match the digraph arcs")
        if any(v == 0.0 for v in beta.values()):
            raise ValueError("every arc needs a nonzero coefficient")
        if find_cycle(self.digraph) is not None:
            raise CyclicInput("weighted DAG must be acyclic")
        object.__setattr__(self, "beta", beta)

    @property
    def m(self) -> int:
        return self.digraph.m

    @classmethod
    def from_matrix(cls, B: np.ndarray, eps: float = 0.0) -> "WeightedDag":
        """Arcs are the entries with ``|B[j, k]| > eps``."""
        m = B.shape[0]
        beta = {(j, k): float(B[j, k]) for j in range(m) for k in range(m)
                if j != k and abs(B[j, k]) > eps}
        return cls(Digraph(m, frozenset(beta)), beta)

    def matrix(self) -> np.ndarray:
        B = np.zeros((self.m, self.m))
        for (j, k), v in self.beta.items():
            B[j, k] = v
        return B


@dataclass(frozen=True)
class LayerNumbering:
    psi: tuple

    def respects(self, dag: Digraph) -> bool:
        return all(self.psi[k] >= self.psi[j] + 1 for j, k in dag.arcs)


def complete_superstructure(m: int) -> SuperStructure:
    if m < 1:
        raise ValueError("m must be at least 1")
    return SuperStructure(m, frozenset(combinations(range(m), 2)))


def moralize(dag: Digraph) -> SuperStructure:
    """Skeleton of ``dag`` plus an edge between every pair of co-parents."""
    if find_cycle(dag) is not None:
        raise CyclicInput("moralize needs an acyclic digraph")
    edges = set(dag.skeleton().edges)
    for k in range(dag.m):
        for a, b in combinations(dag.parents(k), 2):
            edges.add(_edge(a, b))
    return SuperStructure(dag.m, frozenset(edges))


def _successors(m: int, arcs: Iterable[Arc]) -> list[list[int]]:
    succ = [[] for _ in range(m)]
    for j, k in arcs:
        succ[j].append(k)
    for s in succ:
        s.sort()
    return succ


def find_cycle(g: Digraph | tuple[int, Iterable[Arc]]) -> list[Arc] | None:
    """First directed cycle met by a DFS in ascending node order, or None.

    Accepts a :class:`Digraph` or an ``(m, arcs)`` pair. The cycle is
    returned as a closed arc sequence ``[(a, b), (b, c), ..., (z, a)]``.
    """
    if isinstance(g, Digraph):
        m, arcs = g.m, g.arcs
    else:
        m, arcs = g
    succ = _successors(m, arcs)
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * m
    for root in range(m):
        if color[root] != WHITE:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        color[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = BLACK
                stack.pop()
                path.pop()
            elif color[nxt] == GREY:
                cyc = path[path.index(nxt):] + [nxt]
                return list(zip(cyc[:-1], cyc[1:]))
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                stack.append((nxt, iter(succ[nxt])))
                path.append(nxt)
    return None


def topological_order(g: Digraph) -> list[int]:
    """Kahn's algorithm with smallest-index tie-breaking."""
    indeg = [0] * g.m
    for _, k in g.arcs:
        indeg[k] += 1
    succ = _successors(g.m, g.arcs)
    ready = [k for k in range(g.m) if indeg[k] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        j = heapq.heappop(ready)
        order.append(j)
        for k in succ[j]:
            indeg[k] -= 1
            if indeg[k] == 0:
                heapq.heappush(ready, k)
    if len(order) != g.m:
        raise CyclicInput("digraph has a cycle")
    return order


def minimal_layers(dag: Digraph) -> LayerNumbering:
    """Longest-path layer numbers: 1 for sources, 1 + max over parents otherwise."""
    order = topological_order(dag)
    psi = [1] * dag.m
    for k in order:
        for j in dag.parents(k):
            psi[k] = max(psi[k], psi[j] + 1)
    return LayerNumbering(tuple(psi))


def shd(estimated: Digraph, truth: Digraph) -> int:
    """Structural Hamming distance; a reversed arc counts as one edit."""
    if estimated.m != truth.m:
        raise ValueError("graphs must have the same node count")
    est, tru = estimated.arcs, truth.arcs
    dist = 0
    for j, k in combinations(range(truth.m), 2):
        a = ((j, k) in est, (k, j) in est)
        b = ((j, k) in tru, (k, j) in tru)
        if a != b:
            dist += 1
    return dist


def tpr_fpr(estimated: Digraph, truth: Digraph) -> tuple[float, float]:
    if estimated.m != truth.m:
        raise ValueError("graphs must have the same node count")
    P = len(truth.arcs)
    if P == 0:
        raise EmptyTruth("true graph has no arcs")
    N = truth.m * (truth.m - 1) - P
    tp = len(estimated.arcs & truth.arcs)
    fp = len(estimated.arcs - truth.arcs)
    return tp / P, (fp / N if N else 0.0)


def complete_to_tournament(dag: Digraph, ss: SuperStructure) -> Digraph:
    """Orient every remaining super-structure edge without creating a cycle.

    Edges are taken in sorted order; an edge joining ``p`` and ``q`` is
    oriented along an existing directed path if there is one, else as
    ``p -> q`` with ``p < q``.
    """
    if find_cycle(dag) is not None:
        raise CyclicInput("tournament completion needs an acyclic digraph")
    arcs = set(dag.arcs)
    for p, q in ss.sorted_edges():
        if (p, q) in arcs or (q, p) in arcs:
            continue
        if _reaches(dag.m, arcs, q, p):
            arcs.add((q, p))
        else:
            arcs.add((p, q))
    return Digraph(dag.m, frozenset(arcs))


def _reaches(m: int, arcs: Iterable[Arc], src: int, dst: int) -> bool:
    succ = _successors(m, arcs)
    seen = {src}
    queue = deque([src])
    while queue:
        v = queue.popleft()
        if v == dst:
            return True
        for w in succ[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return False


# -- edge-list text format ---------------------------------------------------

def _read_lines(path):
    m = None
    rows = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("m="):
            m = int(line[2:])
            continue
        rows.append(line.split())
    if m is None:
        raise ValueError(f"{path}: missing 'm=<int>' header")
    return m, rows


def read_superstructure(path) -> SuperStructure:
    m, rows = _read_lines(path)
    return SuperStructure(m, frozenset((int(r[0]) - 1, int(r[1]) - 1) for r in rows))


def read_weighted_dag(path) -> WeightedDag:
    m, rows = _read_lines(path)
    beta = {(int(r[0]) - 1, int(r[1]) - 1): float(r[2]) for r in rows}
    return WeightedDag(Digraph(m, frozenset(beta)), beta)


def write_superstructure(ss: SuperStructure, path, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines.append(f"m={ss.m}")
    lines += [f"{j + 1} {k + 1}" for j, k in ss.sorted_edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def write_weighted_dag(wdag: WeightedDag, path, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines.append(f"m={wdag.m}")
    lines += [f"{j + 1} {k + 1} {wdag.beta[(j, k)]!r}" for j, k in sorted(wdag.beta)]
    Path(path).write_text("\n".join(lines) + "\n")
