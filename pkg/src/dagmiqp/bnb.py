"""Branch-and-bound over an :class:`MiqpModel` with lazy cycle cuts.

Nodes differ only in the bounds of binary columns, so every node QP reuses
one OSQP factorization until a lazy cut changes the row set. Node lower
bounds come from :func:`dagmiqp.qp.dual_bound` and stay valid even for
inexact solves.

A node whose fixings already leave an acyclic set of usable arcs is solved
exactly: the acyclicity constraints can no longer bind, so the problem
splits into one penalized regression per node.
"""

from __future__ import annotations

import csv
import heapq
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import Digraph, WeightedDag, find_cycle, topological_order
from .model import (INT_TOL, MiqpModel, Row, assignment_from_order,
                    extract_dag, is_tournament_model)
from .qp import PRIMAL_INFEASIBLE, QpProblem, QpSolver
from .regression import FitCache

OPTIMAL_STATUS = "Optimal"
GAP_REACHED = "GapReached"
TIME_LIMIT = "TimeLimit"
INFEASIBLE = "Infeasible"


@dataclass(frozen=True)
class BnbConfig:
    gap_tol: float = 1e-3
    time_limit: float = 600.0
    int_tol: float = INT_TOL
    branching: str = "MostFractional"
    node_order: str = "BestBound"
    seed: int = 0
    dive_every: int = 50
    root_tol: float = 1e-8
    node_tol: float = 1e-6
    node_max_iter: int = 20000
    heuristic_every: int = 10
    max_cuts_per_round: int = 10
    exact_leaves: bool = True
    separable_bound: bool = True
    max_nodes: Optional[int] = None
    trace_path: Optional[str] = None
    abs_gap: float = 1e-9

    def __post_init__(self):
        if self.gap_tol < 0:
            raise ValueError("gap_tol must be nonnegative")
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")
        if self.branching not in ("MostFractional", "PseudoCost"):
            raise ValueError(f"unknown branching rule {self.branching!r}")
        if self.node_order not in ("BestBound", "DepthFirstDive"):
            raise ValueError(f"unknown node order {self.node_order!r}")


@dataclass
class BnbOutcome:
    x: Optional[np.ndarray]
    dag: Optional[WeightedDag]
    ub: float
    lb: float
    gap: float
    nodes_explored: int
    root_relax_value: float
    root_relax_time: float
    lazy_cuts_added: int
    wall_time: float
    status: str
    cuts: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    incumbents: list = field(default_factory=list)


@dataclass(order=True)
class _Node:
    key: tuple
    id: int = field(compare=False)
    depth: int = field(compare=False)
    lb: float = field(compare=False)
    lo: np.ndarray = field(compare=False, repr=False)
    hi: np.ndarray = field(compare=False, repr=False)
    x0: Optional[np.ndarray] = field(compare=False, default=None, repr=False)
    y0: Optional[np.ndarray] = field(compare=False, default=None, repr=False)
    diving: bool = field(compare=False, default=False)


def relative_gap(ub: float, lb: float, abs_gap: float = 1e-9) -> float:
    if not np.isfinite(ub):
        return np.inf
    if ub <= abs_gap:
        return 0.0 if ub - lb <= abs_gap else np.inf
    return max(0.0, (ub - lb) / ub)


# -- cuts -----------------------------------------------------------------------

def _orient_graph(model: MiqpModel, x) -> set:
    return {arc for arc, e in model.orient.items() if e.value(x) > 0.5}


def lazy_cycle_cuts(x, model: MiqpModel, max_cuts: int = 10) -> list[Row]:
    """One violated cycle row per detected cycle of the integral point ``x``.

    After each cycle the first of its arcs is dropped and the DFS repeats.
    """
    arcs = _orient_graph(model, x)
    cuts = []
    while len(cuts) < max_cuts:
        cyc = find_cycle((model.m, arcs))
        if cyc is None:
            break
        coeffs, const = {}, 0.0
        for arc in cyc:
            e = model.orient[arc]
            const += e.const
            for col, v in e.terms:
                coeffs[col] = coeffs.get(col, 0.0) + v
        coeffs = {c: v for c, v in coeffs.items() if v != 0.0}
        cuts.append(Row(coeffs, -np.inf, len(cyc) - 1.0 - const, "lazy"))
        arcs.discard(cyc[0])
    return cuts


# -- exact leaves and heuristics ---------------------------------------------------

def _fixed(expr, lo, hi):
    """Value of ``expr`` if all its columns are fixed by the bounds, else None."""
    v = expr.const
    for col, c in expr.terms:
        if lo[col] != hi[col]:
            return None
        v += c * lo[col]
    return v


def _to_permutation(model: MiqpModel, lo, hi, arcs) -> Optional[list]:
    """A node order consistent with the fixed o_rs and the precedence ``arcs``."""
    m = model.m
    ocol = {(r, s): model.var_index[("o", r, s)] for r in range(m) for s in range(m)}
    allowed = [[hi[ocol[(r, s)]] > 0.5 for s in range(m)] for r in range(m)]
    pinned = {}
    for (r, s), c in ocol.items():
        if lo[c] > 0.5:
            if s in pinned and pinned[s] != r:
                return None
            pinned[s] = r
    preds = [0] * m
    for j, k in arcs:
        preds[k] |= 1 << j
    reach = {0: None}
    frontier = [0]
    for s in range(m):
        nxt = []
        for mask in frontier:
            for v in range(m):
                if mask >> v & 1 or not allowed[v][s] or preds[v] & ~mask:
                    continue
                if s in pinned and pinned[s] != v:
                    continue
                new = mask | 1 << v
                if new not in reach:
                    reach[new] = (mask, v)
                    nxt.append(new)
        frontier = nxt
    full = (1 << m) - 1
    if full not in reach:
        return None
    order = []
    mask = full
    while mask:
        mask, v = reach[mask]
        order.append(v)
    return order[::-1]


def screen_node(model: MiqpModel, lo, hi):
    """Combinatorial view of a node's fixings.

    Returns ``(usable, forced, prec)``: arcs that may still carry a
    coefficient, arcs whose support is fixed to one, and precedences implied
    by fixed orientations. Returns None when no integral point can satisfy
    the fixings.
    """
    usable, forced, prec = set(), set(), set()
    for arc in model.beta_col:
        s = _fixed(model.support[arc], lo, hi)
        o = _fixed(model.orient[arc], lo, hi)
        if s == 1.0:
            if o == 0.0:
                return None
            forced.add(arc)
        if s != 0.0 and o != 0.0:
            usable.add(arc)
    if is_tournament_model(model):
        pairs = model.order_pairs or model.orient
        for (j, k), e in pairs.items():
            if _fixed(e, lo, hi) == 1.0:
                prec.add((j, k))
        if model.spec.kind == "TO" and not model.spec.to_equality:
            for (j, k), e in model.orient.items():
                if _fixed(e, lo, hi) == 0.0:
                    prec.add((k, j))
    else:
        prec = set(forced)
    if find_cycle((model.m, prec)) is not None:
        return None
    if model.spec.kind == "TO" and _to_permutation(model, lo, hi, prec) is None:
        return None
    return usable, forced, prec


def exact_node_solve(model: MiqpModel, lo, hi, fits: FitCache, screened=None):
    """Solve a node exactly when its usable arcs are already acyclic.

    Returns ``(value, x)``, the string ``"infeasible"``, or None when the
    rule does not apply.
    """
    screened = screened or screen_node(model, lo, hi)
    if screened is None:
        return "infeasible"
    usable, forced, prec = screened
    graph = usable | prec
    if find_cycle((model.m, graph)) is not None:
        return None
    if model.spec.kind == "TO":
        order = _to_permutation(model, lo, hi, graph)
        if order is None:
            return None
    else:
        order = topological_order(Digraph(model.m, frozenset(graph)))
    beta, paid = {}, set()
    for k in range(model.m):
        cand = [j for j in range(model.m) if (j, k) in usable]
        must = [j for j in cand if (j, k) in forced]
        fit = fits(k, cand, must)
        for j, b in zip(fit.parents, fit.beta):
            paid.add((j, k))
            if b != 0.0:
                beta[(j, k)] = b
    x = assignment_from_order(model, order, beta, paid)
    return model.objective(x), x


def separable_bound(model: MiqpModel, fits: FitCache, screened) -> float:
    """Sum of per-node best fits over the node's usable arcs, ignoring acyclicity."""
    usable, forced, _ = screened
    total = 0.0
    for k in range(model.m):
        cand = [j for j in range(model.m) if (j, k) in usable]
        total += fits(k, cand, [j for j in cand if (j, k) in forced]).value
    # the fits are solved to a tiny tolerance, not exactly
    return total - 1e-9 * (1.0 + abs(total))


def _relaxed_order(model: MiqpModel, x) -> list:
    m = model.m
    if model.psi:
        score = [model.psi[k].value(x) for k in range(m)]
    else:
        score = [0.0] * m
        for (j, k), e in model.orient.items():
            v = e.value(x)
            score[k] += v
            score[j] -= v
    return sorted(range(m), key=lambda k: (score[k], k))


def rounding_heuristic(relax_point, model: MiqpModel, fits: Optional[FitCache] = None):
    """Integral acyclic point derived from a relaxation; returns (x, objective)."""
    x = np.asarray(relax_point, dtype=float)
    binaries = x[model.is_binary]
    if (np.all(np.minimum(np.abs(binaries), np.abs(1.0 - binaries)) <= INT_TOL)
            and model.max_violation(x) <= 1e-6
            and find_cycle((model.m, _orient_graph(model, x))) is None):
        return x, model.objective(x)
    if fits is None:
        fits = _fit_cache(model)
    order = _relaxed_order(model, x)
    ss = model.spec.superstructure
    beta, paid = {}, set()
    for i, k in enumerate(order):
        cand = [j for j in order[:i] if ss.has_edge(j, k)]
        fit = fits(k, cand)
        for j, b in zip(fit.parents, fit.beta):
            paid.add((j, k))
            if b != 0.0:
                beta[(j, k)] = b
    xh = assignment_from_order(model, order, beta, paid)
    return xh, model.objective(xh)


def _fit_cache(model: MiqpModel) -> FitCache:
    g = model.gram
    return FitCache(g.S, g.n, model.spec.lam, model.spec.penalty, bound=model.spec.big_m)


# -- relaxations ---------------------------------------------------------------------

def root_relaxation_value(model: MiqpModel, tol: float = 1e-8, extra_rows=()) -> float:
    res = QpSolver(QpProblem.from_model(model, extra_rows), tol=tol).solve()
    if res.status == PRIMAL_INFEASIBLE:
        raise ValueError("root relaxation is infeasible")
    return res.objective


def replay_branching(model: MiqpModel, fixings: dict, tol: float = 1e-8):
    """Relaxation value after fixing columns ``{col: value}``; None if infeasible."""
    lo, hi = model.lower.copy(), model.upper.copy()
    for col, v in fixings.items():
        lo[col] = hi[col] = v
    res = QpSolver(QpProblem.from_model(model), tol=tol).solve(lo, hi)
    if res.status == PRIMAL_INFEASIBLE:
        return None
    return res.objective


# -- the search ----------------------------------------------------------------------

class _Search:
    def __init__(self, model: MiqpModel, cfg: BnbConfig):
        self.model = model
        self.cfg = cfg
        self.t0 = time.perf_counter()
        self.cuts: list[Row] = []
        self.fits = _fit_cache(model)
        self.ub = np.inf
        self.x_best = None
        self.trace = []
        self.incumbents = []
        self.pruned_floor = np.inf
        self.next_id = 0
        self.pseudo = {}
        self._build_solver()

    def _build_solver(self):
        self.qp = QpProblem.from_model(self.model, self.cuts)
        self.solver = QpSolver(self.qp, tol=self.cfg.node_tol, max_iter=self.cfg.node_max_iter,
                               polish=False)
        self._tight = None

    def tight_bound(self, node) -> float:
        """Node bound from a polished solve at the root tolerance."""
        if self._tight is None:
            self._tight = QpSolver(self.qp, tol=self.cfg.root_tol, polish=True)
        res = self._tight.solve(node.lo, node.hi)
        return res.lower_bound if res.status != PRIMAL_INFEASIBLE else np.inf

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def offer(self, x, value, source):
        if value < self.ub - 1e-12:
            if find_cycle((self.model.m, _orient_graph(self.model, x))) is not None:
                return
            self.ub, self.x_best = value, x
            self.incumbents.append((self.elapsed(), value, source))

    def threshold(self) -> float:
        if not np.isfinite(self.ub):
            return np.inf
        return max(self.ub * (1.0 - self.cfg.gap_tol), self.ub - self.cfg.abs_gap)

    def log(self, node, lb, action):
        self.trace.append((node.id, node.depth, lb, self.ub, action))

    def new_node(self, depth, lb, lo, hi, x0=None, y0=None) -> _Node:
        self.next_id += 1
        if self.cfg.node_order == "DepthFirstDive":
            key = (-depth, lb, self.next_id)
        else:
            key = (lb, self.next_id)
        return _Node(key, self.next_id, depth, lb, lo, hi, x0, y0)

    def is_integral(self, x) -> bool:
        cols = self.model.binary_cols
        v = x[cols]
        return bool(np.all(np.minimum(np.abs(v), np.abs(1.0 - v)) <= self.cfg.int_tol))

    def pick_branch(self, x, lo, hi) -> Optional[int]:
        model = self.model
        ordering = set(model.ordering_cols)
        groups = [list(model.ordering_cols),
                  [c for c in model.binary_cols if c not in ordering]]
        for cols in groups:
            best, best_score = None, -1.0
            for c in sorted(cols):
                if lo[c] == hi[c]:
                    continue
                f = min(x[c], 1.0 - x[c])
                if f <= self.cfg.int_tol:
                    continue
                score = f
                if self.cfg.branching == "PseudoCost" and c in self.pseudo:
                    down, up = self.pseudo[c]
                    score = max(down * x[c], 1e-12) * max(up * (1.0 - x[c]), 1e-12)
                if score > best_score + 1e-15:
                    best, best_score = c, score
            if best is not None:
                return best
        return None

    def evaluate(self, node: _Node):
        """Returns ("closed" | "pruned" | "infeasible", lb) or ("branch", lb, res)."""
        screened = screen_node(self.model, node.lo, node.hi)
        if screened is None:
            return ("infeasible", np.inf)
        if self.cfg.exact_leaves:
            ex = exact_node_solve(self.model, node.lo, node.hi, self.fits, screened)
            if ex is not None:
                value, x = ex
                self.offer(x, value, "exact")
                return ("closed", value)
        if self.cfg.separable_bound:
            node.lb = max(node.lb, separable_bound(self.model, self.fits, screened))
            if node.lb >= self.threshold():
                return ("pruned", node.lb)
        while True:
            res = self.solver.solve(node.lo, node.hi, node.x0, node.y0)
            if res.status == PRIMAL_INFEASIBLE:
                return ("infeasible", np.inf)
            lb = max(node.lb, res.lower_bound)
            if lb >= self.threshold():
                return ("pruned", lb)
            if self.is_integral(res.x):
                xr = res.x.copy()
                cols = self.model.binary_cols
                xr[cols] = np.round(xr[cols])
                if self.model.lazy_hook:
                    cuts = lazy_cycle_cuts(xr, self.model, self.cfg.max_cuts_per_round)
                    if cuts:
                        self.cuts.extend(cuts)
                        self._build_solver()
                        node.x0, node.y0 = res.x, None
                        continue
                lo, hi = node.lo.copy(), node.hi.copy()
                lo[cols] = hi[cols] = xr[cols]
                ex = exact_node_solve(self.model, lo, hi, self.fits)
                if isinstance(ex, tuple):
                    self.offer(ex[1], ex[0], "integral")
                    if lb < self.threshold():
                        lb = max(lb, self.tight_bound(node))
                    return ("closed", lb)
            return ("branch", lb, res)

    def run(self) -> BnbOutcome:
        cfg, model = self.cfg, self.model
        empty = assignment_from_order(model, list(range(model.m)), {})
        self.offer(empty, model.objective(empty), "empty")
        t = time.perf_counter()
        root_qp = QpSolver(self.qp, tol=cfg.root_tol).solve()
        root_time = time.perf_counter() - t
        if root_qp.status == PRIMAL_INFEASIBLE:
            return self._outcome(INFEASIBLE, np.inf, 0, np.nan, root_time)
        root_value = root_qp.objective
        xh, vh = rounding_heuristic(root_qp.x, model, self.fits)
        self.offer(xh, vh, "rounding")
        root = self.new_node(0, root_qp.lower_bound, model.lower.copy(), model.upper.copy(),
                             root_qp.x, root_qp.y)
        heap = [root]
        explored = 0
        dive = None
        status = OPTIMAL_STATUS
        while heap or dive is not None:
            if self.elapsed() > cfg.time_limit:
                status = TIME_LIMIT
                break
            if cfg.max_nodes is not None and explored >= cfg.max_nodes:
                status = TIME_LIMIT
                break
            if dive is not None:
                node, dive = dive, None
            else:
                node = heapq.heappop(heap)
            if node.lb >= self.threshold():
                self.pruned_floor = min(self.pruned_floor, node.lb)
                self.log(node, node.lb, "pruned")
                continue
            explored += 1
            out = self.evaluate(node)
            kind, lb = out[0], out[1]
            if kind != "branch":
                if kind in ("pruned", "closed"):
                    self.pruned_floor = min(self.pruned_floor, lb)
                self.log(node, lb, kind)
                continue
            res = out[2]
            diving = cfg.dive_every and explored % cfg.dive_every == 0
            if explored == 1 or explored % cfg.heuristic_every == 0 or diving:
                xh, vh = rounding_heuristic(res.x, model, self.fits)
                self.offer(xh, vh, "rounding")
                if lb >= self.threshold():
                    self.pruned_floor = min(self.pruned_floor, lb)
                    self.log(node, lb, "pruned")
                    continue
            col = self.pick_branch(res.x, node.lo, node.hi)
            if col is None:
                # integral on branching columns but not closed: should not happen
                self.pruned_floor = min(self.pruned_floor, lb)
                self.log(node, lb, "stalled")
                continue
            self.log(node, lb, f"branch:{model.names[col]}")
            children = []
            for v in (0.0, 1.0):
                lo, hi = node.lo.copy(), node.hi.copy()
                lo[col] = hi[col] = v
                y0 = res.y if len(res.y) == self.qp.A.shape[0] + self.qp.n else None
                children.append(self.new_node(node.depth + 1, lb, lo, hi, res.x, y0))
            up_first = res.x[col] >= 0.5
            pref, other = (children[1], children[0]) if up_first else children
            if diving or node.diving:
                # follow the rounding direction until the dive is pruned
                pref.diving = True
                dive = pref
                heapq.heappush(heap, other)
            else:
                heapq.heappush(heap, children[0])
                heapq.heappush(heap, children[1])
        open_lb = min((n.lb for n in heap), default=np.inf)
        if dive is not None:
            open_lb = min(open_lb, dive.lb)
        if status == TIME_LIMIT and relative_gap(self.ub, min(open_lb, self.pruned_floor),
                                                 cfg.abs_gap) <= cfg.gap_tol:
            status = GAP_REACHED
        return self._outcome(status, open_lb, explored, root_value, root_time)

    def _outcome(self, status, open_lb, explored, root_value, root_time) -> BnbOutcome:
        lb = min(open_lb, self.pruned_floor, self.ub)
        dag = None
        if self.x_best is not None and status != INFEASIBLE:
            dag = extract_dag(self.model, self.x_best)
        gap = relative_gap(self.ub, lb, self.cfg.abs_gap)
        out = BnbOutcome(self.x_best, dag, self.ub, lb, gap, explored, root_value, root_time,
                         len(self.cuts), self.elapsed(), status, list(self.cuts), self.trace,
                         self.incumbents)
        if self.cfg.trace_path:
            write_trace(out, self.cfg.trace_path)
        return out


def solve(model: MiqpModel, cfg: BnbConfig = BnbConfig()) -> BnbOutcome:
    return _Search(model, cfg).run()


def write_trace(out: BnbOutcome, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "depth", "lb", "ub", "action"])
        for row in out.trace:
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3])), row[4]])
