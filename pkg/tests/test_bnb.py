from itertools import product

import numpy as np
import pytest

from dagmiqp import (Dataset, FormulationSpec, SuperStructure, build, complete_superstructure,
                     estimate_big_m, find_cycle)
from dagmiqp.bnb import (BnbConfig, exact_node_solve, lazy_cycle_cuts, relative_gap,
                         root_relaxation_value, rounding_heuristic, screen_node,
                         separable_bound, solve, write_trace, _fit_cache)
from dagmiqp.model import assignment_from_order
from dagmiqp.oracle import enumerate_orderings
from dagmiqp.qp import QpProblem, solve_qp

from conftest import make_instance

KINDS = ["CP", "LO", "TO", "LN"]


def spec(kind, penalty, ss, lam, M):
    kw = {"cp_static_triangles": True} if kind == "CP" and ss.is_complete else {}
    return FormulationSpec(kind, penalty, ss, lam, M, **kw)


def test_two_node_noise_free_example():
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal(50)
    data = Dataset(np.column_stack([x1, 0.7 * x1]))
    ss = complete_superstructure(2)
    S = data.X.T @ data.X
    n = 50
    # three candidates: no arc, 0 -> 1, 1 -> 0 (lam = 0, so no penalty)
    none = (S[0, 0] + S[1, 1]) / n
    fwd = S[0, 0] / n + (S[1, 1] - S[0, 1] ** 2 / S[0, 0]) / n
    bwd = S[1, 1] / n + (S[0, 0] - S[0, 1] ** 2 / S[1, 1]) / n
    best = min(none, fwd, bwd)
    for kind in KINDS:
        out = solve(build(spec(kind, "L0", ss, 0.0, 2.0), data), BnbConfig(gap_tol=1e-9))
        assert out.status == "Optimal"
        assert out.ub == pytest.approx(best, rel=1e-9, abs=1e-12)
        (arc, b), = out.dag.beta.items()
        if arc == (0, 1):
            assert b == pytest.approx(0.7, abs=1e-9)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("penalty", ["L0", "L1"])
def test_huge_penalty_gives_empty_graph(kind, penalty):
    w, data, ss = make_instance(4, 1)
    out = solve(build(spec(kind, penalty, ss, 1e4, 1.0), data))
    assert out.dag.beta == {}
    S = data.gram().S
    assert out.ub == pytest.approx(np.trace(S) / data.n, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("penalty", ["L0", "L1"])
def test_matches_ordering_oracle(seed, kind, penalty):
    w, data, ss = make_instance(4 + seed % 3, seed, complete=seed % 2 == 1)
    lam = 0.1
    M = estimate_big_m(data, ss, lam, penalty)
    out = solve(build(spec(kind, penalty, ss, lam, M), data), BnbConfig(gap_tol=1e-7))
    ref = enumerate_orderings(data, ss, lam, penalty, bound=M)
    assert out.status == "Optimal"
    assert abs(out.ub - ref.objective) <= 1e-6 * abs(ref.objective)
    assert find_cycle(out.dag.digraph) is None
    for _, value, _ in out.incumbents:
        assert value >= ref.objective - 1e-6 * abs(ref.objective)


def cp_model(m=4, penalty="L0", complete=True, seed=0):
    w, data, ss = make_instance(m, seed, complete=complete)
    return build(FormulationSpec("CP", penalty, ss, 0.1, 2.0), data)


def support_point(model, arcs):
    x = np.zeros(model.nvars)
    for arc in arcs:
        for col, c in model.orient[arc].terms:
            x[col] = 1.0 if c > 0 else 0.0
    return x


def test_lazy_cuts_examples():
    model = cp_model(3)
    assert lazy_cycle_cuts(support_point(model, [(0, 1), (1, 2)]), model) == []
    cuts = lazy_cycle_cuts(support_point(model, [(0, 1), (1, 2), (2, 0)]), model)
    assert len(cuts) == 1
    cut = cuts[0]
    assert sorted(cut.coeffs.values()) == [1.0, 1.0, 1.0] and cut.upper == 2.0
    model4 = cp_model(4)
    cuts = lazy_cycle_cuts(support_point(model4, [(0, 1), (1, 0), (2, 3), (3, 2)]), model4)
    assert len(cuts) == 2
    for c in cuts:
        assert len(c.coeffs) == 2 and c.upper == 1.0


def test_lazy_cuts_on_tournament_model():
    model = cp_model(3, penalty="L1")
    x = np.zeros(model.nvars)
    # z_01 = 1, z_12 = 1, z_02 = 0 gives 0 -> 1 -> 2 -> 0
    x[model.var_index[("z", 0, 1)]] = 1.0
    x[model.var_index[("z", 1, 2)]] = 1.0
    cut, = lazy_cycle_cuts(x, model)
    lhs = sum(v * x[c] for c, v in cut.coeffs.items())
    assert lhs > cut.upper


def test_lazy_cuts_never_cut_off_acyclic_points():
    model = cp_model(4)
    arcs = model.spec.superstructure.arcs
    cuts = []
    # collect every cut generated from every cyclic support on m = 4
    acyclic = []
    for bits in product((0, 1), repeat=len(arcs)):
        chosen = [a for a, b in zip(arcs, bits) if b]
        x = support_point(model, chosen)
        if find_cycle((4, chosen)) is None:
            acyclic.append(x)
        else:
            cuts.extend(lazy_cycle_cuts(x, model, max_cuts=100))
    assert cuts
    unique = {(tuple(sorted(c.coeffs.items())), c.upper) for c in cuts}
    for coeffs, upper in unique:
        for x in acyclic:
            assert sum(v * x[c] for c, v in coeffs) <= upper + 1e-12


def test_cp_l0_needs_lazy_cuts_beyond_triangles():
    # a 4-cycle survives every two-cycle and triangle row
    model = build(FormulationSpec("CP", "L0", complete_superstructure(4), 0.1, 2.0,
                                  cp_static_triangles=True), Dataset(np.eye(4)))
    x = support_point(model, [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert model.max_violation(x) == 0.0
    assert model.lazy_hook == "cycle"
    assert lazy_cycle_cuts(x, model)


def test_rounding_heuristic_properties():
    w, data, ss = make_instance(5, 2)
    model = build(FormulationSpec("LN", "L0", ss, 0.1, 2.0), data)
    x = assignment_from_order(model, [0, 1, 2, 3, 4], {})
    same, value = rounding_heuristic(x, model)
    assert same is x or np.array_equal(same, x)
    assert value == model.objective(x)
    root = solve_qp(QpProblem.from_model(model)).x
    a, va = rounding_heuristic(root, model)
    b, vb = rounding_heuristic(root.copy(), model)
    assert np.array_equal(a, b) and va == vb
    assert model.max_violation(a) <= 1e-9


def test_screen_and_exact_leaf():
    w, data, ss = make_instance(4, 3, complete=True)
    model = build(FormulationSpec("LN", "L0", ss, 0.1, 2.0), data)
    lo, hi = model.lower.copy(), model.upper.copy()
    fits = _fit_cache(model)
    usable, forced, prec = screen_node(model, lo, hi)
    assert usable == set(ss.arcs) and not forced and not prec
    assert exact_node_solve(model, lo, hi, fits) is None
    # fix every orientation to one order: the node becomes exactly solvable
    order = [3, 1, 0, 2]
    x = assignment_from_order(model, order, {})
    for col in model.ordering_cols:
        lo[col] = hi[col] = x[col]
    value, xe = exact_node_solve(model, lo, hi, fits)
    assert value == pytest.approx(model.objective(xe))
    assert value >= separable_bound(model, fits, screen_node(model, model.lower, model.upper))


def test_root_relaxation_bounds_optimum():
    for seed in range(3):
        w, data, ss = make_instance(4, seed)
        M = estimate_big_m(data, ss, 0.1, "L0")
        model = build(FormulationSpec("LN", "L0", ss, 0.1, M), data)
        root = root_relaxation_value(model)
        out = solve(model, BnbConfig(gap_tol=1e-8))
        assert root <= out.ub + 1e-9


def test_zero_lambda_root_is_least_squares():
    w, data, ss = make_instance(4, 0, complete=True)
    M = 10 * estimate_big_m(data, ss, 0.0, "L0")
    model = build(FormulationSpec("LN", "L0", ss, 0.0, M), data)
    # binaries free means every beta may be nonzero: full regression of each node
    S, n = data.gram().S, data.n
    val = 0.0
    for k in range(4):
        p = [j for j in range(4) if j != k]
        b = np.linalg.solve(S[np.ix_(p, p)], S[p, k])
        val += (S[k, k] - S[p, k] @ b) / n
    assert root_relaxation_value(model) == pytest.approx(val, abs=1e-7)


def test_time_limit_reports_partial_result(tmp_path):
    w, data, ss = make_instance(8, 0, n=200, complete=True)
    M = estimate_big_m(data, ss, 0.1, "L0")
    model = build(FormulationSpec("TO", "L0", ss, 0.1, M), data)
    out = solve(model, BnbConfig(gap_tol=0.0, time_limit=0.5, trace_path=str(tmp_path / "t.csv")))
    assert out.status in ("TimeLimit", "GapReached")
    assert np.isfinite(out.ub) and np.isfinite(out.lb) and out.lb <= out.ub
    assert find_cycle(out.dag.digraph) is None
    head = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert head == "id,depth,lb,ub,action"


def test_search_is_deterministic():
    w, data, ss = make_instance(5, 4)
    model = build(FormulationSpec("LN", "L0", ss, 0.1, 2.0), data)
    a, b = solve(model), solve(model)
    assert a.ub == b.ub and a.nodes_explored == b.nodes_explored
    assert [t[:2] + t[3:] for t in a.trace] == [t[:2] + t[3:] for t in b.trace]


def test_relative_gap_and_config_validation():
    assert relative_gap(np.inf, 0.0) == np.inf
    assert relative_gap(10.0, 9.0) == pytest.approx(0.1)
    assert relative_gap(0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        BnbConfig(branching="Strong")
    with pytest.raises(ValueError):
        BnbConfig(time_limit=0)


@pytest.mark.parametrize("branching, order", [("PseudoCost", "BestBound"),
                                              ("MostFractional", "DepthFirstDive")])
def test_search_variants_agree(branching, order):
    w, data, ss = make_instance(5, 5)
    M = estimate_big_m(data, ss, 0.1, "L1")
    model = build(FormulationSpec("LN", "L1", ss, 0.1, M), data)
    ref = enumerate_orderings(data, ss, 0.1, "L1", bound=M)
    out = solve(model, BnbConfig(gap_tol=1e-7, branching=branching, node_order=order,
                                 exact_leaves=False, separable_bound=False))
    assert out.ub == pytest.approx(ref.objective, rel=1e-6)


@pytest.mark.slow
def test_root_rounding_is_close_on_moral_m10(moral_m10):
    close = 0
    for run in moral_m10:
        model = run["model"]
        root = solve_qp(QpProblem.from_model(model)).x
        _, value = rounding_heuristic(root, model)
        close += value <= 1.2 * run["out"].ub
    assert close >= 8
