"""MIQP builders for the CP, LO, TO and LN acyclicity formulations.

All four share one objective stored in beta-space,

    (1/n) sum_k ||X_k - sum_j beta_jk X_j||^2 + lam * sum g        (L0)
    (1/n) sum_k ||X_k - sum_j beta_jk X_j||^2 + lam * sum |beta|   (L1)

written as 0.5 x'Px + q'x + const. The L1 absolute value uses an auxiliary
column a_jk >= |beta_jk|. Binary columns enter only linear rows.

Pairwise orientation variables are stored once per unordered pair
{j, k} with j < k; the reverse direction is the affine expression
1 - z_jk. This is the tournament substitution z_jk + z_kj = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import Arc, CyclicInput, Digraph, SuperStructure, WeightedDag, find_cycle
from .regression import best_subset, lasso
from .sem import GramCache, _as_gram

KINDS = ("CP", "LO", "TO", "LN")
PENALTIES = ("L0", "L1")

# row families that Table-1 style counts treat as cycle prevention
ACYCLIC_FAMILIES = ("cycle", "triangle", "order", "assign", "layer")

INT_TOL = 1e-5


class OptionMismatch(ValueError):
    pass


class NeighborhoodTooLarge(ValueError):
    pass


class CyclicExtraction(CyclicInput):
    pass


@dataclass(frozen=True)
class FormulationSpec:
    kind: str
    penalty: str
    superstructure: SuperStructure
    lam: float
    big_m: float
    to_equality: bool = True
    to_mminus1: bool = True
    cp_static_triangles: bool = False
    ln_no_psi: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.lam < 0 or self.big_m <= 0:
            raise ValueError("need lam >= 0 and big_m > 0")
        if self.kind != "CP" and self.cp_static_triangles:
            raise OptionMismatch("cp_static_triangles is a CP option")
        if self.kind != "LN" and self.ln_no_psi:
            raise OptionMismatch("ln_no_psi is an LN option")
        if self.kind != "TO" and (not self.to_equality or not self.to_mminus1):
            # the TO flags default to True; only TO may turn them off
            raise OptionMismatch("to_equality / to_mminus1 are TO options")
        if self.ln_no_psi and not self.superstructure.is_complete:
            raise OptionMismatch("ln_no_psi needs a complete super-structure")


@dataclass(frozen=True)
class LinExpr:
    """sum(coef * x[col]) + const."""

    terms: tuple = ()
    const: float = 0.0

    @classmethod
    def var(cls, col: int) -> "LinExpr":
        return cls(((col, 1.0),), 0.0)

    @classmethod
    def complement(cls, col: int) -> "LinExpr":
        return cls(((col, -1.0),), 1.0)

    def __add__(self, other: "LinExpr") -> "LinExpr":
        return LinExpr(self.terms + other.terms, self.const + other.const)

    def scale(self, c: float) -> "LinExpr":
        return LinExpr(tuple((j, c * v) for j, v in self.terms), c * self.const)

    def value(self, x) -> float:
        return self.const + sum(v * x[j] for j, v in self.terms)

    def columns(self) -> list[int]:
        return [j for j, _ in self.terms]


@dataclass(frozen=True)
class Row:
    coeffs: dict
    lower: float
    upper: float
    family: str


@dataclass
class MiqpModel:
    spec: FormulationSpec
    names: list
    is_binary: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    P: sp.csc_matrix
    q: np.ndarray
    const: float
    rows: list
    var_index: dict
    beta_col: dict
    support: dict
    orient: dict
    ordering_cols: list
    lazy_hook: Optional[str] = None
    psi: dict = field(default_factory=dict)
    order_pairs: dict = field(default_factory=dict)
    gram: Optional[GramCache] = None

    @property
    def nvars(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return self.spec.superstructure.m

    @property
    def binary_cols(self) -> list[int]:
        return [j for j in range(self.nvars) if self.is_binary[j]]

    def constraint_matrix(self, extra_rows=()):
        rows = list(self.rows) + list(extra_rows)
        data, ri, ci = [], [], []
        for i, r in enumerate(rows):
            for j, v in r.coeffs.items():
                ri.append(i)
                ci.append(j)
                data.append(v)
        A = sp.csc_matrix((data, (ri, ci)), shape=(len(rows), self.nvars))
        lo = np.array([r.lower for r in rows], dtype=float)
        hi = np.array([r.upper for r in rows], dtype=float)
        return A, lo, hi

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)

    def count_binaries(self) -> int:
        return int(self.is_binary.sum())

    def count_rows(self, families=ACYCLIC_FAMILIES) -> int:
        return sum(r.family in families for r in self.rows)

    def family_counts(self) -> dict:
        out = {}
        for r in self.rows:
            out[r.family] = out.get(r.family, 0) + 1
        return out

    def max_violation(self, x, extra_rows=()) -> float:
        """Largest bound or row violation of ``x`` (0 when feasible)."""
        x = np.asarray(x, dtype=float)
        v = max(0.0, float(np.max(self.lower - x, initial=0.0)),
                float(np.max(x - self.upper, initial=0.0)))
        A, lo, hi = self.constraint_matrix(extra_rows)
        if A.shape[0]:
            ax = A @ x
            v = max(v, float(np.max(lo - ax, initial=0.0)), float(np.max(ax - hi, initial=0.0)))
        return v

    def dump(self) -> str:
        return dump_lp(self)


class _Builder:
    def __init__(self, spec: FormulationSpec, data):
        self.spec = spec
        self.gram = _as_gram(data)
        if self.gram.m != spec.superstructure.m:
            raise ValueError("data and super-structure disagree on m")
        self.names, self.binary, self.lo, self.hi = [], [], [], []
        self.index = {}
        self.rows = []
        self.lin = {}

    def add_var(self, key, binary, lo, hi) -> int:
        col = len(self.names)
        self.index[key] = col
        self.names.append(_display(key))
        self.binary.append(binary)
        self.lo.append(lo)
        self.hi.append(hi)
        return col

    def add_row(self, expr: LinExpr, lo: float, hi: float, family: str) -> None:
        coeffs = {}
        for j, v in expr.terms:
            coeffs[j] = coeffs.get(j, 0.0) + v
        coeffs = {j: v for j, v in coeffs.items() if v != 0.0}
        self.rows.append(Row(coeffs, lo - expr.const, hi - expr.const, family))

    def finish(self, beta_col, support, orient, ordering_cols, lazy_hook=None, psi=None):
        nv = len(self.names)
        m = self.spec.superstructure.m
        S, n = self.gram.S, self.gram.n
        rows, cols, vals = [], [], []
        q = np.zeros(nv)
        for k in range(m):
            into = [(j, beta_col[(j, k)]) for j in range(m) if (j, k) in beta_col]
            for j, cj in into:
                q[cj] = -2.0 * S[j, k] / n
                for l, cl in into:
                    rows.append(cj)
                    cols.append(cl)
                    vals.append(2.0 * S[j, l] / n)
        for col, c in self.lin.items():
            q[col] += c
        P = sp.csc_matrix((vals, (rows, cols)), shape=(nv, nv))
        return MiqpModel(
            spec=self.spec, names=self.names, is_binary=np.array(self.binary, dtype=bool),
            lower=np.array(self.lo, dtype=float), upper=np.array(self.hi, dtype=float),
            P=P, q=q, const=float(np.trace(S)) / n, rows=self.rows, var_index=self.index,
            beta_col=beta_col, support=support, orient=orient, ordering_cols=ordering_cols,
            lazy_hook=lazy_hook, psi=psi or {}, gram=self.gram,
        )


def _display(key) -> str:
    name, *idx = key
    return name + "_" + "_".join(str(i + 1) for i in idx)


def _pair_orient(b: _Builder, name: str, pairs) -> dict:
    """One binary per unordered pair; both directions as expressions."""
    orient = {}
    for j, k in pairs:
        col = b.add_var((name, j, k), True, 0.0, 1.0)
        orient[(j, k)] = LinExpr.var(col)
        orient[(k, j)] = LinExpr.complement(col)
    return orient


def _beta_block(b: _Builder) -> dict:
    spec = b.spec
    beta_col = {}
    for arc in spec.superstructure.arcs:
        beta_col[arc] = b.add_var(("beta",) + arc, False, -spec.big_m, spec.big_m)
    return beta_col


def _penalty_block(b: _Builder, beta_col: dict, l1_indicator: Optional[dict]) -> dict:
    """Big-M rows and the penalty term; returns the support indicator per arc.

    For L0 a g column per arc carries the penalty. For L1 an abs column
    carries it and ``l1_indicator`` (z or w expressions) bounds beta.
    """
    spec = b.spec
    M = spec.big_m
    support = {}
    if spec.penalty == "L0":
        for arc, bc in beta_col.items():
            gc = b.add_var(("g",) + arc, True, 0.0, 1.0)
            b.lin[gc] = spec.lam
            support[arc] = LinExpr.var(gc)
    else:
        for arc, bc in beta_col.items():
            ac = b.add_var(("a",) + arc, False, 0.0, M)
            b.lin[ac] = spec.lam
            beta = LinExpr.var(bc)
            b.add_row(beta + LinExpr.var(ac).scale(-1.0), -np.inf, 0.0, "abs")
            b.add_row(beta.scale(-1.0) + LinExpr.var(ac).scale(-1.0), -np.inf, 0.0, "abs")
            support[arc] = l1_indicator[arc]
    for arc, bc in beta_col.items():
        beta = LinExpr.var(bc)
        bound = support[arc].scale(-M)
        b.add_row(beta + bound, -np.inf, 0.0, "bigm")
        b.add_row(beta.scale(-1.0) + bound, -np.inf, 0.0, "bigm")
    return support


def _link_rows(b: _Builder, support: dict, orient: dict) -> None:
    if b.spec.penalty == "L0":
        for arc, g in support.items():
            b.add_row(g + orient[arc].scale(-1.0), -np.inf, 0.0, "link")


def build_ln(spec: FormulationSpec, data) -> MiqpModel:
    if spec.kind != "LN":
        raise OptionMismatch("build_ln needs kind='LN'")
    b = _Builder(spec, data)
    ss = spec.superstructure
    m = ss.m
    beta_col = _beta_block(b)
    orient = _pair_orient(b, "z", ss.sorted_edges())
    ordering = [b.index[("z", j, k)] for j, k in ss.sorted_edges()]
    if spec.ln_no_psi:
        psi = {k: sum((orient[(i, k)] for i in range(m) if i != k), LinExpr())
               for k in range(m)}
    else:
        psi = {k: LinExpr.var(b.add_var(("psi", k), False, 1.0, float(m))) for k in range(m)}
    support = _penalty_block(b, beta_col, orient)
    _link_rows(b, support, orient)
    for j, k in ss.sorted_edges():
        diff_jk = psi[k] + psi[j].scale(-1.0)
        if ss.is_complete:
            expr = orient[(j, k)].scale(float(m)) + diff_jk.scale(-1.0)
            b.add_row(expr, 1.0, m - 1.0, "layer")
        else:
            for a, c in ((j, k), (k, j)):
                expr = (orient[(a, c)] + orient[(c, a)].scale(-(m - 1.0))
                        + psi[c].scale(-1.0) + psi[a])
                b.add_row(expr, -np.inf, 0.0, "layer")
    return b.finish(beta_col, support, orient, ordering, psi=psi)


def build_to(spec: FormulationSpec, data) -> MiqpModel:
    if spec.kind != "TO":
        raise OptionMismatch("build_to needs kind='TO'")
    b = _Builder(spec, data)
    ss = spec.superstructure
    m = ss.m
    coef = m - 1.0 if spec.to_mminus1 else float(m)
    beta_col = _beta_block(b)
    if spec.to_equality:
        orient = _pair_orient(b, "z", ss.sorted_edges())
        ordering = [b.index[("z", j, k)] for j, k in ss.sorted_edges()]
    else:
        orient = {arc: LinExpr.var(b.add_var(("z",) + arc, True, 0.0, 1.0)) for arc in ss.arcs}
        ordering = [b.index[("z",) + arc] for arc in ss.arcs]
    ocol = {(r, s): b.add_var(("o", r, s), True, 0.0, 1.0) for r in range(m) for s in range(m)}
    ordering += [ocol[(r, s)] for r in range(m) for s in range(m)]
    pos = {r: LinExpr(tuple((ocol[(r, s)], s + 1.0) for s in range(m))) for r in range(m)}
    support = _penalty_block(b, beta_col, orient)
    _link_rows(b, support, orient)
    if not spec.to_equality:
        for j, k in ss.sorted_edges():
            b.add_row(orient[(j, k)] + orient[(k, j)], -np.inf, 1.0, "two_cycle")
    for j, k in ss.sorted_edges():
        if ss.is_complete and spec.to_equality:
            expr = orient[(j, k)].scale(coef + 1.0) + pos[k].scale(-1.0) + pos[j]
            b.add_row(expr, 1.0, coef, "order")
        else:
            for a, c in ((j, k), (k, j)):
                expr = orient[(a, c)] + orient[(c, a)].scale(-coef) + pos[c].scale(-1.0) + pos[a]
                b.add_row(expr, -np.inf, 0.0, "order")
    for r in range(m):
        b.add_row(LinExpr(tuple((ocol[(r, s)], 1.0) for s in range(m))), 1.0, 1.0, "assign")
    for s in range(m):
        b.add_row(LinExpr(tuple((ocol[(r, s)], 1.0) for r in range(m))), 1.0, 1.0, "assign")
    return b.finish(beta_col, support, orient, ordering, psi=pos)


def build_lo(spec: FormulationSpec, data) -> MiqpModel:
    if spec.kind != "LO":
        raise OptionMismatch("build_lo needs kind='LO'")
    b = _Builder(spec, data)
    ss = spec.superstructure
    m = ss.m
    beta_col = _beta_block(b)
    order = _pair_orient(b, "w", combinations(range(m), 2))
    ordering = [b.index[("w", j, k)] for j, k in combinations(range(m), 2)]
    orient = {arc: order[arc] for arc in ss.arcs}
    support = _penalty_block(b, beta_col, order)
    _link_rows(b, support, orient)
    for i, j, k in combinations(range(m), 3):
        for cyc in ((i, j, k), (i, k, j)):
            a, c, d = cyc
            expr = order[(a, c)] + order[(c, d)] + order[(d, a)]
            b.add_row(expr, -np.inf, 2.0, "triangle")
    psi = {k: sum((order[(l, k)] for l in range(m) if l != k), LinExpr()) for k in range(m)}
    model = b.finish(beta_col, support, orient, ordering, psi=psi)
    model.order_pairs = order
    return model


def build_cp(spec: FormulationSpec, data) -> MiqpModel:
    if spec.kind != "CP":
        raise OptionMismatch("build_cp needs kind='CP'")
    b = _Builder(spec, data)
    ss = spec.superstructure
    m = ss.m
    beta_col = _beta_block(b)
    if spec.penalty == "L0":
        support = _penalty_block(b, beta_col, None)
        orient = dict(support)
        ordering = [c for e in support.values() for c in e.columns()]
        for j, k in ss.sorted_edges():
            b.add_row(orient[(j, k)] + orient[(k, j)], -np.inf, 1.0, "two_cycle")
    else:
        orient = _pair_orient(b, "z", ss.sorted_edges())
        ordering = [b.index[("z", j, k)] for j, k in ss.sorted_edges()]
        support = _penalty_block(b, beta_col, orient)
    lazy = "cycle"
    if spec.cp_static_triangles and ss.is_complete:
        for i, j, k in combinations(range(m), 3):
            for a, c, d in ((i, j, k), (i, k, j)):
                expr = orient[(a, c)] + orient[(c, d)] + orient[(d, a)]
                b.add_row(expr, -np.inf, 2.0, "cycle")
        # a tournament without 3-cycles is transitive; l0 supports are not
        # tournaments, so longer cycles still need the lazy check there
        if spec.penalty == "L1":
            lazy = None
    return b.finish(beta_col, support, orient, sorted(ordering), lazy_hook=lazy)


BUILDERS = {"CP": build_cp, "LO": build_lo, "TO": build_to, "LN": build_ln}


def build(spec: FormulationSpec, data) -> MiqpModel:
    return BUILDERS[spec.kind](spec, data)


def estimate_big_m(data, ss: SuperStructure, lam: float, penalty: str,
                   enumeration_cap: int = 20, force_enumeration: bool = False) -> float:
    """Twice the largest coefficient of the acyclicity-free problem, floored at 1e-3."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    gram = _as_gram(data)
    biggest = 0.0
    for k in range(ss.m):
        ne = ss.neighbors(k)
        if penalty == "L0" and len(ne) <= enumeration_cap:
            fit = best_subset(gram.S, gram.n, k, ne, lam, max_candidates=enumeration_cap)
        elif penalty == "L0" and force_enumeration:
            raise NeighborhoodTooLarge(f"node {k} has {len(ne)} neighbors")
        else:
            fit = lasso(gram.S, gram.n, k, ne, lam, gap_tol=1e-8)
        if fit.beta:
            biggest = max(biggest, float(np.max(np.abs(fit.beta))))
    return max(2.0 * biggest, 1e-3)


def support_value(model: MiqpModel, arc: Arc, x) -> float:
    return model.support[arc].value(x)


def extract_dag(model: MiqpModel, x, eps: float = 1e-6) -> WeightedDag:
    x = np.asarray(x, dtype=float)
    for j in model.binary_cols:
        if min(abs(x[j]), abs(1.0 - x[j])) > INT_TOL:
            raise ValueError(f"binary {model.names[j]} = {x[j]} is fractional")
    beta = {}
    for arc, col in model.beta_col.items():
        if model.support[arc].value(x) > 0.5 and abs(x[col]) > eps:
            beta[arc] = float(x[col])
    dg = Digraph(model.m, frozenset(beta))
    cyc = find_cycle(dg)
    if cyc is not None:
        raise CyclicExtraction(f"extracted graph has cycle {cyc}")
    return WeightedDag(dg, beta)


def assignment_from_order(model: MiqpModel, order, beta: dict, paid=None) -> np.ndarray:
    """Full variable vector for coefficients ``beta`` under node ``order``.

    ``order`` lists nodes first to last and must be consistent with every
    nonzero coefficient. ``paid`` is the L0 support (defaults to the
    nonzero arcs).
    """
    x = np.zeros(model.nvars)
    pos = {v: i for i, v in enumerate(order)}
    paid = set(beta) if paid is None else set(paid)
    for arc, col in model.beta_col.items():
        x[col] = beta.get(arc, 0.0)
    for key, col in model.var_index.items():
        name = key[0]
        if name == "a":
            x[col] = abs(beta.get(key[1:], 0.0))
        elif name == "g":
            x[col] = 1.0 if key[1:] in paid else 0.0
        elif name in ("z", "w"):
            j, k = key[1:]
            x[col] = 1.0 if pos[j] < pos[k] else 0.0
        elif name == "psi":
            x[col] = pos[key[1]] + 1.0
        elif name == "o":
            r, s = key[1:]
            x[col] = 1.0 if pos[r] == s else 0.0
    return x


def dump_lp(model: MiqpModel) -> str:
    """LP-style text listing: objective, rows, bounds, binaries."""
    names = model.names
    out = ["\\ dagmiqp model " + f"{model.spec.kind} {model.spec.penalty}", "Minimize", " obj:"]
    terms = [f" {v:+.17g} {names[j]}" for j, v in enumerate(model.q) if v != 0.0]
    P = model.P.tocoo()
    quad = [f" {v:+.17g} {names[i]} * {names[j]}" for i, j, v in zip(P.row, P.col, P.data)
            if v != 0.0]
    out.extend(terms)
    if quad:
        out.append(" + [")
        out.extend(quad)
        out.append(" ] / 2")
    out.append(f" {model.const:+.17g}")
    out.append("Subject To")
    for i, r in enumerate(model.rows):
        expr = " ".join(f"{v:+.17g} {names[j]}" for j, v in sorted(r.coeffs.items()))
        if np.isfinite(r.lower) and np.isfinite(r.upper) and r.lower == r.upper:
            out.append(f" {r.family}_{i}: {expr} = {r.upper:.17g}")
        else:
            if np.isfinite(r.lower):
                out.append(f" {r.family}_{i}_lo: {expr} >= {r.lower:.17g}")
            if np.isfinite(r.upper):
                out.append(f" {r.family}_{i}_up: {expr} <= {r.upper:.17g}")
    out.append("Bounds")
    for j, name in enumerate(names):
        out.append(f" {model.lower[j]:.17g} <= {name} <= {model.upper[j]:.17g}")
    out.append("Binaries")
    out.append(" " + " ".join(names[j] for j in model.binary_cols))
    out.append("End")
    return "\n".join(out) + "\n"


def is_tournament_model(model: MiqpModel) -> bool:
    """True when every pair of opposite arcs has complementary orientation."""
    return not (model.spec.kind == "CP" and model.spec.penalty == "L0")


def orientation_fixings(model: MiqpModel, arc: Arc, value: int) -> dict:
    """Column fixings that orient ``arc`` (value 1) or its reverse (value 0).

    For l0-CP there is no orientation variable; fixing j -> k means the
    reverse indicator g_kj is 0 and vice versa.
    """
    j, k = arc
    if not is_tournament_model(model):
        drop = (k, j) if value == 1 else (j, k)
        (col, _), = model.support[drop].terms
        return {col: 0.0}
    expr = model.order_pairs.get(arc) or model.orient[arc]
    (col, coef), = expr.terms
    if model.spec.kind == "TO" and not model.spec.to_equality:
        rev, = model.orient[(k, j)].terms
        return {col: float(value), rev[0]: float(1 - value)}
    return {col: float(value) if coef > 0 else float(1 - value)}
