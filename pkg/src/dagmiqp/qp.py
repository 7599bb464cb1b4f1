"""Convex QP relaxations: OSQP operator splitting plus an active-set polish.

Problems have the form

    min 0.5 x'Px + q'x + const   s.t.  l <= Ax <= u,  lb <= x <= ub

with every variable boxed. Variable bounds are passed to OSQP as identity
rows so that branch-and-bound fixings only change the bound vectors and the
factorization is reused.

Besides the primal point, each result carries ``lower_bound``: a Lagrangian
bound that is valid for any multiplier estimate, so branch-and-bound stays
correct even when a solve stops early.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import osqp
import scipy.sparse as sp
from scipy.optimize import linprog, lsq_linear

OPTIMAL = "Optimal"
PRIMAL_INFEASIBLE = "PrimalInfeasible"
DUAL_INFEASIBLE = "DualInfeasible"
ITER_LIMIT = "IterLimit"

_INFEASIBLE_CODES = (3, 4)
_DUAL_INFEASIBLE_CODES = (5, 6)


@dataclass(frozen=True)
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        n = len(self.q)
        if self.P.shape != (n, n) or self.A.shape[1] != n:
            raise ValueError("dimension mismatch")
        if np.any(self.lb > self.ub) or np.any(self.l > self.u):
            raise ValueError("inconsistent bounds")

    @property
    def n(self) -> int:
        return len(self.q)

    @classmethod
    def from_model(cls, model, extra_rows=()) -> "QpProblem":
        A, l, u = model.constraint_matrix(extra_rows)
        return cls(model.P, model.q, A, l, u, model.lower.copy(), model.upper.copy(),
                   model.const)

    def with_bounds(self, lb, ub) -> "QpProblem":
        return replace(self, lb=np.asarray(lb, float), ub=np.asarray(ub, float))

    def with_rows(self, A_new, l_new, u_new) -> "QpProblem":
        return replace(self, A=sp.vstack([self.A, A_new]).tocsc(),
                       l=np.concatenate([self.l, l_new]), u=np.concatenate([self.u, u_new]))

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)

    def stacked(self):
        A = sp.vstack([self.A, sp.identity(self.n, format="csc")]).tocsc()
        return A, np.concatenate([self.l, self.lb]), np.concatenate([self.u, self.ub])

    def primal_residual(self, x) -> float:
        ax = self.A @ x
        parts = [self.l - ax, ax - self.u, self.lb - x, x - self.ub]
        return float(max(np.max(p, initial=0.0) for p in parts))

    def dual_residual(self, x, y) -> float:
        """||Px + q + [A; I]'y||_inf with ``y`` over rows then bounds."""
        k = self.A.shape[0]
        g = self.P @ x + self.q + self.A.T @ y[:k] + y[k:]
        return float(np.max(np.abs(g), initial=0.0))

    def complementarity(self, x, y) -> float:
        """Largest |multiplier * slack| over rows and bounds, each side separately."""
        k = self.A.shape[0]
        ax = self.A @ x
        out = 0.0
        for yy, v, lo, hi in ((y[:k], ax, self.l, self.u), (y[k:], x, self.lb, self.ub)):
            yp, ym = np.maximum(yy, 0.0), np.maximum(-yy, 0.0)
            su = np.where(np.isfinite(hi), hi - v, 0.0)
            sl = np.where(np.isfinite(lo), v - lo, 0.0)
            out = max(out, float(np.max(np.abs(yp * su) + np.abs(ym * sl), initial=0.0)))
        return out


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    objective: float
    status: str
    primal_residual: float
    dual_residual: float
    lower_bound: float
    iterations: int = 0
    complementarity: float = np.nan

    @property
    def row_duals(self):
        return self.y


def dual_bound(p: QpProblem, x, y) -> float:
    """Lagrangian lower bound from any point ``x`` and row multipliers.

    Linearizes the convex objective at ``x`` and minimizes the resulting
    affine Lagrangian exactly over the variable box. Only the multipliers of
    the general rows are used; the box is kept as a hard set.
    """
    x = np.clip(np.asarray(x, float), p.lb, p.ub)
    k = p.A.shape[0]
    yr = np.array(y[:k], dtype=float)
    yp = np.where(np.isfinite(p.u), np.maximum(yr, 0.0), 0.0)
    ym = np.where(np.isfinite(p.l), np.maximum(-yr, 0.0), 0.0)
    yr = yp - ym
    grad = p.P @ x + p.q
    c = grad + p.A.T @ yr
    box = np.where(c >= 0.0, c * p.lb, c * p.ub)
    u = np.where(yp > 0, p.u, 0.0)
    l = np.where(ym > 0, p.l, 0.0)
    return float(p.objective(x) - grad @ x + box.sum() - yp @ u + ym @ l)


def _polish(p: QpProblem, x, thresholds=(1e-6, 1e-5, 1e-7, 1e-4)):
    """Refine ``x`` on an active set guessed from primal slacks.

    The KKT system is solved in the least-norm sense, which tolerates
    redundant active rows. Multipliers are then refit with the correct signs
    by bounded least squares. Returns the candidate with the smallest
    residuals, or None.
    """
    A, l, u = p.stacked()
    A = A.tocsr()
    ax = A @ x
    n = p.n
    Pd = p.P.toarray()
    best = None
    for thr in thresholds:
        at_l = np.isfinite(l) & (ax - l <= thr * (1.0 + np.abs(l)))
        at_u = np.isfinite(u) & (u - ax <= thr * (1.0 + np.abs(u)))
        act = np.flatnonzero(at_l | at_u)
        Aa = A[act].toarray()
        rhs_b = np.where(at_u[act], u[act], l[act])
        K = np.block([[Pd, Aa.T], [Aa, np.zeros((len(act), len(act)))]])
        # solve for the correction from x so free directions stay put
        rhs = np.concatenate([-(Pd @ x + p.q), rhs_b - Aa @ x])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        xs = x + sol[:n]
        pres = p.primal_residual(xs)
        if pres > 1e-9:
            continue
        lo = np.where(at_l[act], -np.inf, 0.0)
        hi = np.where(at_u[act], np.inf, 0.0)
        g = -(Pd @ xs + p.q)
        if len(act):
            fit = lsq_linear(Aa.T, g, bounds=(lo, hi), method="bvls", tol=1e-15)
            ya = fit.x
        else:
            ya = np.zeros(0)
        ys = np.zeros(A.shape[0])
        ys[act] = ya
        dres = p.dual_residual(xs, ys)
        score = max(pres, dres)
        if best is None or score < best[0]:
            best = (score, xs, ys)
        if score <= 1e-11:
            break
    return None if best is None else best[1:]


def _interior_point(p: QpProblem):
    """Fallback primal-dual interior-point solve; returns (x, y) in OSQP sign convention."""
    from cvxopt import matrix, solvers, spmatrix

    A = p.A.tocsr()
    k, n = A.shape
    eq = np.flatnonzero(p.l == p.u)
    up = np.flatnonzero(np.isfinite(p.u) & (p.l != p.u))
    lo = np.flatnonzero(np.isfinite(p.l) & (p.l != p.u))
    free = p.lb != p.ub
    eye = sp.identity(n, format="csr")
    G = sp.vstack([A[up], -A[lo], eye[free], -eye[free]]).tocoo()
    h = np.concatenate([p.u[up], -p.l[lo], p.ub[free], -p.lb[free]])
    fixed = np.flatnonzero(~free)
    E = sp.vstack([A[eq], eye[fixed]]).tocoo()
    b = np.concatenate([p.l[eq], p.lb[fixed]])

    def spm(M):
        return spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

    Pm = (p.P + 1e-13 * sp.identity(n)).tocoo()
    solvers.options.update({"show_progress": False, "abstol": 1e-11, "reltol": 1e-11,
                            "feastol": 1e-11, "maxiters": 100})
    try:
        sol = solvers.qp(spm(Pm), matrix(p.q), spm(G), matrix(h),
                         spm(E) if len(b) else None, matrix(b) if len(b) else None)
    except (ValueError, ArithmeticError):
        return None
    if sol["x"] is None:
        return None
    x = np.array(sol["x"]).ravel()
    z = np.array(sol["z"]).ravel()
    ye = np.array(sol["y"]).ravel() if len(b) else np.zeros(0)
    y = np.zeros(k + n)
    nu, nl, nf = len(up), len(lo), int(free.sum())
    y[up] += z[:nu]
    y[lo] -= z[nu:nu + nl]
    fidx = np.flatnonzero(free)
    y[k + fidx] += z[nu + nl:nu + nl + nf]
    y[k + fidx] -= z[nu + nl + nf:]
    y[eq] += ye[:len(eq)]
    y[k + fixed] += ye[len(eq):]
    return x, y


def _linprog_feasible(p: QpProblem):
    A = p.A.tocsr()
    fin_u, fin_l = np.isfinite(p.u), np.isfinite(p.l)
    A_ub = sp.vstack([A[fin_u], -A[fin_l]]) if A.shape[0] else None
    b_ub = np.concatenate([p.u[fin_u], -p.l[fin_l]]) if A.shape[0] else None
    res = linprog(np.zeros(p.n), A_ub=A_ub, b_ub=b_ub, bounds=list(zip(p.lb, p.ub)),
                  method="highs")
    return res.status == 0, (res.x if res.status == 0 else None)


class QpSolver:
    """A persistent OSQP workspace; node solves change only the box."""

    def __init__(self, p: QpProblem, tol: float = 1e-8, max_iter: int = 200000,
                 polish: bool = True, fallback: bool = True):
        self.p = p
        self.polish = polish
        self.fallback = fallback
        self.tol = tol
        self.max_iter = max_iter
        A, l, u = p.stacked()
        self._l, self._u = l, u
        self._k = p.A.shape[0]
        self._solver = osqp.OSQP()
        P = sp.triu(p.P, format="csc")
        self._solver.setup(P, p.q, A, l, u, verbose=False, eps_abs=tol, eps_rel=tol,
                           eps_prim_inf=1e-5, eps_dual_inf=1e-5, max_iter=max_iter,
                           polishing=False, adaptive_rho_interval=25,
                           warm_starting=True, scaling=10)

    def solve(self, lb=None, ub=None, x0=None, y0=None) -> QpResult:
        p = self.p if lb is None else self.p.with_bounds(lb, ub)
        l = np.concatenate([p.l, p.lb])
        u = np.concatenate([p.u, p.ub])
        if x0 is not None and y0 is not None:
            x0, y0 = np.asarray(x0, float), np.asarray(y0, float)
            if len(y0) == len(l):
                pres, dres = p.primal_residual(x0), p.dual_residual(x0, y0)
                comp = p.complementarity(x0, y0)
                if max(pres, dres, comp) <= self.tol:
                    # the warm start already satisfies the optimality conditions
                    obj = p.objective(x0)
                    return QpResult(x0.copy(), y0.copy(), obj, OPTIMAL, pres, dres,
                                    min(dual_bound(p, x0, y0), obj), 0, comp)
        self._solver.update(l=l, u=u)
        if x0 is not None:
            if y0 is None:
                self._solver.warm_start(x=np.asarray(x0, float))
            else:
                self._solver.warm_start(x=np.asarray(x0, float), y=np.asarray(y0, float))
        elif y0 is None:
            self._solver.warm_start(x=np.zeros(p.n), y=np.zeros(len(l)))
        res = self._solver.solve(raise_error=False)
        return self._finish(p, res)

    def _needs_fallback(self, p: QpProblem, code, x, y) -> bool:
        # polished solves must meet tol; node solves only need a usable bound
        if self.polish or code not in (1, 2):
            return True
        obj = p.objective(x)
        return obj - dual_bound(p, x, y) > 1e-4 * (1.0 + abs(obj))

    def _finish(self, p: QpProblem, res) -> QpResult:
        code = res.info.status_val
        iters = res.info.iter
        if code in _INFEASIBLE_CODES:
            feasible, x = _linprog_feasible(p)
            if not feasible:
                return QpResult(np.full(p.n, np.nan), np.zeros(len(self._l)), np.inf,
                                PRIMAL_INFEASIBLE, np.inf, np.inf, np.inf, iters)
            # OSQP gave up too early; restart from a feasible point
            self._solver.warm_start(x=x, y=np.zeros(len(self._l)))
            res = self._solver.solve(raise_error=False)
            iters += res.info.iter
            code = res.info.status_val
        if code in _DUAL_INFEASIBLE_CODES:
            return QpResult(np.full(p.n, np.nan), np.zeros(len(self._l)), -np.inf,
                            DUAL_INFEASIBLE, np.inf, np.inf, -np.inf, iters)
        x = np.asarray(res.x, float)
        y = np.asarray(res.y, float)
        if code in _INFEASIBLE_CODES or not np.all(np.isfinite(x)):
            # feasibility is already certified, so only the iterate is bad
            x, y, code = np.clip(np.nan_to_num(x), p.lb, p.ub), np.zeros(len(self._l)), 7

        def kkt(x, y):
            return max(p.primal_residual(x), p.dual_residual(x, y), p.complementarity(x, y))

        err = kkt(x, y)
        if err > self.tol and self.polish:
            pol = _polish(p, x)
            if pol is not None and kkt(*pol) < err:
                x, y = pol
                err = kkt(x, y)
        if err > self.tol and self.fallback and self._needs_fallback(p, code, x, y):
            ip = _interior_point(p)
            if ip is not None:
                xs, ys = ip
                pol = _polish(p, xs)
                if pol is not None and kkt(*pol) < kkt(xs, ys):
                    xs, ys = pol
                if kkt(xs, ys) < err:
                    x, y, code = xs, ys, 1
        pres, dres = p.primal_residual(x), p.dual_residual(x, y)
        comp = p.complementarity(x, y)
        ok = max(pres, dres, comp) <= self.tol
        status = OPTIMAL if ok else ITER_LIMIT
        lb = dual_bound(p, x, y)
        obj = p.objective(x)
        if ok:
            lb = min(lb, obj)
        return QpResult(x, y, obj, status, pres, dres, lb, iters, comp)


def solve_qp(p: QpProblem, tol: float = 1e-8, max_iter: int = 200000) -> QpResult:
    return QpSolver(p, tol, max_iter).solve()


def warm_start_solve(p: QpProblem, x0, y0=None, tol: float = 1e-8,
                     max_iter: int = 200000) -> QpResult:
    return QpSolver(p, tol, max_iter).solve(x0=x0, y0=y0)
