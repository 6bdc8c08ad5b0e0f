import io
import itertools

import numpy as np
import pytest

from regioloc import conic
from regioloc.conic import ConicProblem
from regioloc.geometry import Region
from regioloc.mibb import (BnBConfig, Branching, MIStatus, NodeSelection, branch_select, label_priority, mip_gap,
                           rounding_heuristic, solve_mi)
from regioloc.prefs import Cell, ProductionPreference, Subdivision, emit_threshold, normalize
from regioloc.socp import ConicSolution, SolverConfig, Status, solve

VALUES = np.array([10, 13, 7, 8, 12, 3, 9, 6], float)
WEIGHTS = np.array([5, 7, 4, 3, 8, 1, 6, 2], float)
CAP = 17.0


def knapsack():
    prob = ConicProblem()
    y = [prob.add_var(f"y[{k}]", binary=True) for k in range(len(VALUES))]
    prob.add_ge(CAP - conic.lin_sum(w * h for w, h in zip(WEIGHTS, y)))
    prob.set_objective(conic.lin_sum(-v * h for v, h in zip(VALUES, y)))
    return prob


def knapsack_brute():
    best = 0.0
    for bits in itertools.product((0, 1), repeat=len(VALUES)):
        b = np.array(bits)
        if b @ WEIGHTS <= CAP:
            best = max(best, b @ VALUES)
    return -best


def soc_selection(seed):
    """Pick a subset of sites; pay a fixed cost per site plus the distance from a free point to their mean."""
    rng = np.random.default_rng(seed)
    sites, cost = rng.uniform(-3, 3, (5, 2)), rng.uniform(0.2, 1.5, 5)
    target = rng.uniform(-1, 1, 2)
    prob = ConicProblem()
    y = [prob.add_var(f"y[{k}]", binary=True) for k in range(5)]
    x = prob.add_vars("x", 2)
    t = prob.add_var("t")
    prob.add_ge(conic.lin_sum(y) - 2.0)
    for d in range(2):
        # x = sum_k y_k site_k / 2 only when exactly two sites are chosen
        prob.add_eq(2.0 * x[d] - conic.lin_sum(sites[k, d] * y[k] for k in range(5)))
    prob.add_ge(2.0 - conic.lin_sum(y))
    conic.epigraph_distance(prob, x, list(target), t, 2)
    prob.set_objective(t + conic.lin_sum(c * h for c, h in zip(cost, y)))
    brute = min(np.linalg.norm(sites[list(pair)].mean(0) - target) + cost[list(pair)].sum()
                for pair in itertools.combinations(range(5), 2))
    return prob, brute


def test_knapsack_matches_brute_force():
    res = solve_mi(knapsack())
    assert res.status is MIStatus.OPTIMAL
    assert res.objective == pytest.approx(knapsack_brute(), abs=1e-5)
    assert res.mip_gap <= 1e-4


@pytest.mark.parametrize("selection", list(NodeSelection))
@pytest.mark.parametrize("branching", list(Branching))
def test_soc_selection_matches_brute_force(selection, branching):
    for seed in range(4):
        prob, brute = soc_selection(seed)
        res = solve_mi(prob, BnBConfig(node_selection=selection, branching=branching))
        assert res.status is MIStatus.OPTIMAL
        assert res.objective == pytest.approx(brute, rel=1e-4)


def test_builtin_engine_also_solves():
    prob, brute = soc_selection(1)
    res = solve_mi(prob, BnBConfig(), engine="builtin")
    assert res.objective == pytest.approx(brute, rel=1e-4)


def test_integral_root_needs_one_node():
    prob = ConicProblem()
    y = prob.add_var("y", binary=True)
    x = prob.add_var("x")
    prob.add_ge(x - 1.0)
    prob.set_objective(x + y)
    res = solve_mi(prob)
    assert res.status is MIStatus.OPTIMAL and res.nodes == 1
    assert res.objective == pytest.approx(1.0, abs=1e-6)


def test_infeasible_binaries():
    prob = ConicProblem()
    y = [prob.add_var(f"y[{k}]", binary=True) for k in range(2)]
    prob.add_eq(conic.lin_sum(y) - 1.5)
    prob.set_objective(conic.lin_sum(y))
    assert solve_mi(prob).status is MIStatus.INFEASIBLE


def test_infeasible_relaxation():
    prob = ConicProblem()
    y = prob.add_var("y", binary=True)
    prob.add_ge(y - 2.0)
    prob.set_objective(y)
    res = solve_mi(prob)
    assert res.status is MIStatus.INFEASIBLE and not res.has_solution


def test_no_integrality_delegates():
    prob = ConicProblem()
    t = prob.add_var("t")
    prob.add_soc([t, 3.0, 4.0])
    prob.set_objective(t)
    res = solve_mi(prob)
    assert res.status is MIStatus.OPTIMAL and res.objective == pytest.approx(5.0, abs=1e-6)


def test_node_limit():
    res = solve_mi(knapsack(), BnBConfig(node_limit=1, heuristic_every=10**9))
    assert res.nodes == 1
    assert res.status in (MIStatus.NO_SOLUTION, MIStatus.FEASIBLE)
    if res.status is MIStatus.FEASIBLE:
        assert res.mip_gap > 1e-4


def test_time_limit_zero():
    res = solve_mi(knapsack(), BnBConfig(time_limit=0.0))
    assert res.status is MIStatus.NO_SOLUTION and res.nodes == 0


def test_gap_definition():
    assert mip_gap(10.0, 9.0) == pytest.approx(0.1)
    assert mip_gap(0.0, 0.0) == 0.0
    assert mip_gap(float("inf"), 1.0) == float("inf")


def test_child_bounds_never_drop():
    prob, _ = soc_selection(2)
    res = solve_mi(prob, BnBConfig(polish=False))
    raw = {nid: obj for nid, _, _, obj, _, st in res.node_log if st == "optimal"}
    for nid, parent, _, obj, _, st in res.node_log:
        if st == "optimal" and parent in raw:
            assert obj >= raw[parent] - 1e-6 * (1 + abs(raw[parent]))


def test_deterministic():
    prob, _ = soc_selection(3)
    a, b = solve_mi(prob), solve_mi(prob)
    assert a.nodes == b.nodes
    assert np.array_equal(a.incumbent.u, b.incumbent.u)


def test_threads_give_same_objective():
    prob, brute = soc_selection(0)
    res = solve_mi(prob, BnBConfig(threads=3))
    assert res.objective == pytest.approx(brute, rel=1e-4)


def test_progress_log():
    buf = io.StringIO()
    solve_mi(knapsack(), progress=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "node,bound,incumbent,gap,time"
    assert len(lines) > 1 and all(len(ln.split(",")) == 5 for ln in lines[1:])


# branching --------------------------------------------------------------------

def test_branch_select_examples():
    cfg = BnBConfig(branching=Branching.MOST_FRACTIONAL)
    assert branch_select([0.5, 0.9], cfg) == 0
    assert branch_select([0.5, 0.5], cfg) == 0
    pri = BnBConfig(branching=Branching.LABEL_PRIORITY)
    assert branch_select([0.5, 0.7], pri, labels=["z[1][0]", "y[0][1]"]) == 1
    assert branch_select([0.5, 0.7], pri, labels=["xi[0][1]", "z[1][0]"]) == 1


def test_branch_select_skips_fixed():
    cfg = BnBConfig(branching=Branching.MOST_FRACTIONAL)
    assert branch_select([0.5, 0.3], cfg, candidates=[False, True]) == 1
    with pytest.raises(ValueError):
        branch_select([0.0, 1.0], cfg)


def test_label_priority_order():
    assert label_priority("y[3][1]") < label_priority("z[2][0]") < label_priority("r1.xi[0][2]")
    assert label_priority("_aux") == 3


# rounding heuristic -------------------------------------------------------------

def _relaxation(prob, values):
    std = prob.to_standard()
    u = np.zeros(std.num_vars)
    for label, v in values.items():
        u[prob.labels.index(label)] = v
    return ConicSolution(Status.OPTIMAL, u, np.zeros(std.num_rows), np.zeros(std.num_rows), 0.0)


def test_rounding_takes_argmax():
    prob = ConicProblem()
    y = [prob.add_var(f"y[0][{j}]", binary=True) for j in range(2)]
    x = prob.add_var("x")
    prob.add_onehot(y)
    prob.add_ge(x - y[1])
    prob.set_objective(x)
    sol = rounding_heuristic(_relaxation(prob, {"y[0][0]": 0.6, "y[0][1]": 0.4}), prob)
    assert sol is not None
    assert sol.u[[h.index for h in y]].tolist() == [1.0, 0.0]


def test_rounding_integral_relaxation_unchanged():
    prob = ConicProblem()
    y = [prob.add_var(f"y[0][{j}]", binary=True) for j in range(2)]
    x = prob.add_var("x")
    prob.add_onehot(y)
    prob.add_ge(x - 2 * y[0] - y[1])
    prob.set_objective(x)
    relaxed = prob.to_standard()
    relaxed.integer = relaxed.integer[:0]
    root = solve(relaxed, SolverConfig(), "ipm")
    sol = rounding_heuristic(root, prob)
    assert np.allclose(sol.u, root.u, atol=1e-6)


def test_rounding_rejected_by_cell_cut():
    # only the (1, 1) quadrant reaches the threshold; rounding lands in (0, 1)
    def half(axis):
        e = np.eye(2)[axis]
        return Subdivision([Cell.from_arrays([e], [0.0]), Cell.from_arrays([-e], [0.0])], [1, 2])

    region = Region((0, 0), 1.0)
    spec = ProductionPreference("CD", (half(0), half(1)), (0.5, 0.5))
    prob = ConicProblem()
    a = prob.add_vars("a", 2)
    conic.region_membership(prob, a, region)
    emit_threshold(prob, a, region, normalize(spec, region), 1.0)
    prob.set_objective(a[0])
    relax = _relaxation(prob, {"xi[0][0]": 0.6, "xi[0][1]": 0.4, "xi[1][0]": 0.4, "xi[1][1]": 0.6})
    assert rounding_heuristic(relax, prob) is None
