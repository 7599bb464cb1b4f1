import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from dagmiqp import FormulationSpec, build, estimate_big_m
from dagmiqp.model import orientation_fixings
from dagmiqp.oracle import reference_qp
from dagmiqp.qp import (OPTIMAL, PRIMAL_INFEASIBLE, QpProblem, QpSolver, dual_bound, solve_qp,
                        warm_start_solve)

from conftest import make_instance


def box_problem(P, q, A=None, l=None, u=None, lb=None, ub=None):
    n = len(q)
    A = sp.csc_matrix((0, n)) if A is None else sp.csc_matrix(A)
    l = np.zeros(0) if l is None else np.asarray(l, float)
    u = np.zeros(0) if u is None else np.asarray(u, float)
    lb = np.full(n, -1e3) if lb is None else np.asarray(lb, float)
    ub = np.full(n, 1e3) if ub is None else np.asarray(ub, float)
    return QpProblem(sp.csc_matrix(P), np.asarray(q, float), A, l, u, lb, ub)


def test_one_dimensional_closed_form():
    # min x^2 s.t. x >= 3
    p = box_problem([[2.0]], [0.0], A=[[1.0]], l=[3.0], u=[np.inf])
    r = solve_qp(p)
    assert r.status == OPTIMAL
    assert r.x[0] == pytest.approx(3.0, abs=1e-8)
    assert r.objective == pytest.approx(9.0, abs=1e-7)
    assert r.lower_bound <= r.objective


@pytest.mark.parametrize("seed", range(5))
def test_unconstrained_matches_linear_solve(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((5, 5))
    Q = B @ B.T + np.eye(5)
    c = rng.standard_normal(5)
    r = solve_qp(box_problem(Q, c))
    assert np.allclose(r.x, -np.linalg.solve(Q, c), atol=1e-7)


@given(st.integers(0, 10**6))
def test_random_box_qps_match_reference(seed):
    rng = np.random.default_rng(seed)
    n, k = 4, 3
    B = rng.standard_normal((n, n))
    P = B @ B.T
    q = rng.standard_normal(n)
    A = rng.standard_normal((k, n))
    l, u = -np.abs(rng.standard_normal(k)), np.abs(rng.standard_normal(k))
    lb, ub = -np.ones(n), np.ones(n)
    p = box_problem(P, q, A, l, u, lb, ub)
    r = solve_qp(p)
    ref = reference_qp(P, q, A, l, u, lb, ub)
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(ref.objective, abs=1e-7 * (1 + abs(ref.objective)))
    assert ref.kkt_residual <= 1e-8


@pytest.mark.parametrize("kind", ["CP", "LO", "TO", "LN"])
@pytest.mark.parametrize("penalty", ["L0", "L1"])
def test_relaxation_matches_reference(kind, penalty):
    w, data, ss = make_instance(4, 0, complete=True)
    M = estimate_big_m(data, ss, 0.1, penalty)
    kw = {"cp_static_triangles": True} if kind == "CP" else {}
    model = build(FormulationSpec(kind, penalty, ss, 0.1, M, **kw), data)
    p = QpProblem.from_model(model)
    r = solve_qp(p)
    ref = reference_qp(p.P, p.q, p.A, p.l, p.u, p.lb, p.ub, p.const)
    assert r.status == OPTIMAL
    assert abs(r.objective - ref.objective) <= 1e-7 * max(1.0, abs(ref.objective))
    assert max(r.primal_residual, r.dual_residual, r.complementarity) <= 1e-8


def test_warm_start_at_optimum_is_immediate():
    w, data, ss = make_instance(4, 1)
    model = build(FormulationSpec("LN", "L0", ss, 0.1, 2.0), data)
    p = QpProblem.from_model(model)
    r = solve_qp(p)
    again = warm_start_solve(p, r.x, r.y)
    assert again.iterations <= 2
    assert again.objective == pytest.approx(r.objective, abs=1e-9)


def test_parent_warm_start_beats_cold_start():
    w, data, ss = make_instance(5, 3, n=200)
    M = estimate_big_m(data, ss, 0.1, "L0")
    model = build(FormulationSpec("LN", "L0", ss, 0.1, M), data)
    p = QpProblem.from_model(model)
    parent = solve_qp(p)
    solver = QpSolver(p, tol=1e-6, polish=False, fallback=False)
    rng = np.random.default_rng(0)
    warm, cold = [], []
    bins = model.binary_cols
    for _ in range(100):
        col = int(rng.choice(bins))
        lo, hi = model.lower.copy(), model.upper.copy()
        lo[col] = hi[col] = float(rng.integers(2))
        rw = solver.solve(lo, hi, parent.x, parent.y)
        rc = solver.solve(lo, hi)
        if rw.status != PRIMAL_INFEASIBLE:
            warm.append(rw.iterations)
            cold.append(rc.iterations)
    assert np.median(warm) < np.median(cold)


def test_contradictory_fixing_is_infeasible():
    w, data, ss = make_instance(4, 2, complete=True)
    model = build(FormulationSpec("TO", "L0", ss, 0.1, 2.0, to_equality=False), data)
    fix = orientation_fixings(model, (0, 1), 1)
    lo, hi = model.lower.copy(), model.upper.copy()
    for col, v in fix.items():
        lo[col] = hi[col] = v
    # force the reverse arc on as well: z_01 + z_10 <= 1 is violated
    rev = model.var_index[("z", 1, 0)]
    lo[rev] = hi[rev] = 1.0
    r = QpSolver(QpProblem.from_model(model)).solve(lo, hi)
    assert r.status == PRIMAL_INFEASIBLE
    assert r.lower_bound == np.inf


def test_tightening_bounds_never_lowers_value():
    w, data, ss = make_instance(4, 4)
    model = build(FormulationSpec("LN", "L0", ss, 0.1, 2.0), data)
    p = QpProblem.from_model(model)
    solver = QpSolver(p)
    base = solver.solve().objective
    lo, hi = model.lower.copy(), model.upper.copy()
    for col in model.binary_cols[:3]:
        lo[col] = hi[col] = 1.0
        r = solver.solve(lo, hi)
        if r.status == PRIMAL_INFEASIBLE:
            break
        assert r.objective >= base - 1e-7
        base = r.objective


def test_dual_bound_is_valid_for_any_multiplier():
    w, data, ss = make_instance(4, 5)
    model = build(FormulationSpec("LN", "L1", ss, 0.1, 2.0), data)
    p = QpProblem.from_model(model)
    opt = solve_qp(p).objective
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(p.lb, p.ub)
        y = rng.standard_normal(p.A.shape[0] + p.n)
        assert dual_bound(p, x, y) <= opt + 1e-9


def test_solves_are_deterministic():
    w, data, ss = make_instance(5, 6)
    model = build(FormulationSpec("LO", "L0", ss, 0.1, 2.0), data)
    p = QpProblem.from_model(model)
    a, b = solve_qp(p), solve_qp(p)
    assert np.array_equal(a.x, b.x) and a.objective == b.objective


def test_problem_validation():
    with pytest.raises(ValueError):
        box_problem(np.eye(2), [0.0], None)
    with pytest.raises(ValueError):
        box_problem(np.eye(1), [0.0], lb=[1.0], ub=[0.0])
