"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest -v tests/test_acceptance.py``; the criterion lines are printed
even when output capture is on.
"""

import dataclasses
import math
import time

import cvxpy as cp
import numpy as np
import pytest
from scipy.optimize import minimize

from regioloc import conic, gen
from regioloc.conic import ConicProblem
from regioloc.gen import GenConfig, generate
from regioloc.geometry import Region, eval_norm, overlap_candidates, sample_region
from regioloc.harness import kruskal_wallis, threshold_test
from regioloc.mibb import BnBConfig
from regioloc.model import Instance, normalize_instance, solve_instance, validate_solution
from regioloc.oracle import enumerate_best, grid_weber
from regioloc.prefs import ProductionPreference, normalize
from regioloc.socp import SolverConfig, Status, solve

TAUS = (1, 2, 3, 4, math.inf)
TIGHT = SolverConfig(eps_primal=1e-8, eps_dual=1e-8, eps_gap=1e-8)
# tighter than the 1e-4 target so that monotonicity is not blurred by the gap
EXACT = BnBConfig(rel_gap=1e-6)

# every solved (instance, solution, options) triple, validated by criterion 7
SOLVED = []


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def rel_err(a, b, floor=1e-9):
    return abs(a - b) / max(abs(b), floor)


# shared batches ----------------------------------------------------------------

GEOMETRIES = {"G1": dict(seed=1, blob_clusters=1, blob_std=0.25), "G2": dict(seed=3, blob_clusters=3, blob_std=0.15)}


@pytest.fixture(scope="module")
def small_batch():
    """30 instances with n=4, p=2 (two geometries x five families x three thresholds), both models."""
    t0 = time.perf_counter()
    records = []
    for geo, kw in GEOMETRIES.items():
        for fam in gen.FAMILIES:
            for thr in (0.0, 0.2, 0.8):
                for colloc in (False, True):
                    inst = generate(GenConfig(n=4, p=2, scenario="mixed", pref_family=fam, threshold=thr,
                                              collocation=colloc, **kw))
                    sol = solve_instance(inst, EXACT)
                    ref = enumerate_best(inst).objective
                    records.append(dict(geo=geo, fam=fam, thr=thr, colloc=colloc, inst=inst, sol=sol, ref=ref))
    return records, time.perf_counter() - t0


@pytest.fixture(scope="module")
def protocol_batch():
    """n=100, l2, p=1, linear preferences, five seeds x three thresholds."""
    rows, sols = [], []
    for seed in range(5):
        for thr in (0.0, 0.2, 0.8):
            inst = generate(GenConfig(n=100, p=1, scenario="l2", pref_family="L", threshold=thr, seed=seed))
            sol = solve_instance(inst)
            sols.append((inst, sol, {}))
            rows.append({"n": 100, "p": 1, "scenario": "l2", "pref_family": "L", "threshold": thr,
                         "collocation": False, "seed": seed, "status": sol.status, "objective": sol.objective})
    return rows, sols


# criteria ------------------------------------------------------------------------

def test_c1_cone_towers(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for tau in TAUS:
        for _ in range(100):
            z = rng.normal(size=2) * 10 ** rng.uniform(-2, 2)
            prob = ConicProblem()
            t = prob.add_var("t")
            conic.epigraph_norm(prob, [float(v) for v in z], t, tau)
            prob.set_objective(t)
            sol = solve(prob, TIGHT, "ipm")
            assert sol.status is Status.OPTIMAL
            worst = max(worst, rel_err(sol.objective, eval_norm(z, tau)))
    elapsed = time.perf_counter() - t0
    report(capsys, 1, worst <= 1e-6 and elapsed < 30, f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def _closed_form(inst):
    C = np.array([r.center for r in inst.regions])
    rad = np.array([r.radius for r in inst.regions])
    w = np.array([r.weight for r in inst.regions])

    def f(x):
        return float(w @ np.maximum(np.linalg.norm(C - x, axis=1) - rad, 0.0))

    best = math.inf
    for x0 in (w @ C / w.sum(), np.median(C, axis=0), *C[:3]):
        res = minimize(f, x0, method="Nelder-Mead", options={"xatol": 1e-11, "fatol": 1e-13, "maxiter": 20_000})
        best = min(best, res.fun)
    return best


def test_c2_single_facility_agreement(capsys):
    t0 = time.perf_counter()
    worst_grid = worst_closed = 0.0
    sizes = np.random.default_rng(7).integers(2, 21, 20)
    for seed, n in enumerate(sizes):
        inst = generate(GenConfig(n=int(n), p=1, scenario="l2", threshold=0.0, seed=100 + seed))
        sol = solve_instance(inst)
        SOLVED.append((inst, sol, {}))
        _, grid = grid_weber(inst)
        worst_grid = max(worst_grid, rel_err(sol.objective, grid))
        worst_closed = max(worst_closed, rel_err(sol.objective, _closed_form(inst)))
    elapsed = time.perf_counter() - t0
    ok = worst_grid <= 1e-4 and worst_closed <= 1e-4 and elapsed < 120
    report(capsys, 2, ok, f"grid {worst_grid:.2e}, closed form {worst_closed:.2e}, {elapsed:.1f}s")


def test_c3_branch_and_bound_exact(small_batch, capsys):
    records, elapsed = small_batch
    SOLVED.extend((r["inst"], r["sol"], {}) for r in records)
    worst = max(rel_err(r["sol"].objective, r["ref"]) for r in records)
    optimal = all(r["sol"].status == "optimal" for r in records)
    ok = optimal and worst <= 1e-4 and elapsed < 600
    report(capsys, 3, ok, f"{len(records)} solves, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_c4_threshold_monotonicity(small_batch, protocol_batch, capsys):
    series = {}
    for r in small_batch[0]:
        series.setdefault((r["geo"], r["fam"], r["colloc"]), {})[r["thr"]] = r["sol"].objective
    for row in protocol_batch[0]:
        series.setdefault(("protocol", row["seed"]), {})[row["threshold"]] = row["objective"]
    bad = [k for k, tc in series.items() if not (tc[0.0] <= tc[0.2] + 1e-6 <= tc[0.8] + 2e-6)]
    report(capsys, 4, not bad, f"{len(series)} paired series, violations {bad}")


def _unit_weights(inst):
    return dataclasses.replace(inst, regions=[dataclasses.replace(r, weight=1.0) for r in inst.regions])


def test_c5_collocation(capsys):
    t0 = time.perf_counter()
    checked, bad = 0, []
    for seed in range(10):
        base = generate(GenConfig(n=6, p=1, scenario="l2", seed=seed, blob_clusters=1, blob_std=0.3))
        if not overlap_candidates(base.regions):
            continue
        checked += 1
        plain = solve_instance(base)
        weighted = solve_instance(dataclasses.replace(base, collocation=True), weighted_collocation=True)
        unit = _unit_weights(base)
        unit_plain = solve_instance(unit)
        unit_colloc = solve_instance(dataclasses.replace(unit, collocation=True))
        SOLVED.extend([(base, plain, {}), (dataclasses.replace(base, collocation=True), weighted,
                                           {"weighted_collocation": True}),
                       (unit, unit_plain, {}), (dataclasses.replace(unit, collocation=True), unit_colloc, {})])
        if weighted.objective > plain.objective + 1e-6 or unit_colloc.objective > unit_plain.objective + 1e-6:
            bad.append(seed)
    # two separated regions on top, two overlapping ones at the bottom
    regions = [Region((0, 5), 0.5), Region((3, 5), 0.5), Region((0.2, 0), 0.6), Region((1.0, 0), 0.6)]
    plain = solve_instance(Instance(regions, None))
    merged = solve_instance(Instance(regions, None, collocation=True))
    ref = enumerate_best(Instance(regions, None, collocation=True)).objective
    SOLVED.extend([(Instance(regions, None), plain, {}), (Instance(regions, None, collocation=True), merged, {})])
    saving = 1 - merged.objective / plain.objective
    elapsed = time.perf_counter() - t0
    ok = (checked > 0 and not bad and saving >= 0.2 and merged.collocated == [(3, 2)]
          and rel_err(merged.objective, ref) <= 1e-5 and elapsed < 60)
    report(capsys, 5, ok, f"dominance on {checked} overlapping instances (violations {bad}), "
                          f"constructed saving {saving:.1%}, {elapsed:.1f}s")


def _margin_problem(ball_norm, rows):
    x, s = cp.Variable(2), cp.Variable()
    A, b, nrm = cp.Parameter((rows, 2)), cp.Parameter(rows), cp.Parameter(rows, nonneg=True)
    c, r = cp.Parameter(2), cp.Parameter(nonneg=True)
    p = "inf" if math.isinf(ball_norm) else int(ball_norm)
    prob = cp.Problem(cp.Maximize(s), [A @ x + cp.multiply(nrm, s) <= b, cp.norm(x - c, p) <= r - s, s <= r])
    return prob, (A, b, nrm, c, r), s


def _enumerate_bounds(spec, region, cache):
    """min / max of the preference over cell combinations meeting the region, checked one by one."""
    vals = []
    for combo in spec.combos():
        cells = [f.cells[l] for f, l in zip(spec.factors, combo)]
        A = np.vstack([cell.arrays()[0] for cell in cells])
        b = np.concatenate([cell.arrays()[1] for cell in cells])
        key = (region.ball_norm, len(b))
        if key not in cache:
            cache[key] = _margin_problem(*key)
        prob, (Ap, bp, nrm, c, r), s = cache[key]
        Ap.value, bp.value, nrm.value = A, b, np.linalg.norm(A, axis=1)
        c.value, r.value = np.array(region.center), region.radius
        prob.solve(solver=cp.CLARABEL)
        if s.value is not None and s.value > 1e-5 * region.radius:
            vals.append(spec.combo_value(combo))
    return min(vals), max(vals)


def test_c6_normalization(capsys):
    rng = np.random.default_rng(6)
    lo = hi = 0.5
    mismatched = []
    cache = {}
    for fam in gen.FAMILIES:
        inst = generate(GenConfig(n=50, scenario="mixed", pref_family=fam, seed=60))
        for i, (spec, region) in enumerate(zip(inst.prefs, inst.regions)):
            norm = normalize(spec, region)
            vals = [norm.normalized(x) for x in sample_region(region, 2000, rng)]
            lo, hi = min(lo, float(np.min(vals))), max(hi, float(np.max(vals)))
            if isinstance(spec, ProductionPreference) and (norm.lb, norm.ub) != _enumerate_bounds(spec, region, cache):
                mismatched.append((fam, i))
    ok = lo >= -1e-6 and hi <= 1 + 1e-6 and not mismatched
    report(capsys, 6, ok, f"sampled min {lo:.2e}, max {hi:.8f}, production mismatches {mismatched}")


def test_c8_kruskal_wallis(protocol_batch, capsys):
    rows, sols = protocol_batch
    SOLVED.extend(sols)
    H0, _ = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    H, p, groups = threshold_test(rows, n=100)
    ok = H0 == 7.2 and math.isfinite(H) and 0 <= p <= 1 and all(len(v) == 5 for v in groups.values())
    report(capsys, 8, ok, f"H(1..9) = {H0}, protocol batch H = {H:.4g}, p = {p:.4g}")


def test_c9_desk_scale(capsys):
    inst = generate(GenConfig(n=50, p=1, scenario="l2", pref_family="L", threshold=0.2, seed=0))
    t0 = time.perf_counter()
    sol = solve_instance(inst, BnBConfig(rel_gap=1e-4))
    elapsed = time.perf_counter() - t0
    SOLVED.append((inst, sol, {}))
    ok = sol.status == "optimal" and sol.mip_gap <= 1e-4 and elapsed < 60
    report(capsys, 9, ok, f"status {sol.status}, gap {sol.mip_gap:.1e}, {elapsed:.2f}s")


def test_c10_determinism(tmp_path, capsys):
    cfg = GenConfig(n=6, p=2, scenario="mixed", pref_family="CES", threshold=0.2, collocation=True, seed=10)
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    objs = []
    for path in paths:
        inst = generate(cfg)
        gen.save(inst, path)
        sol = solve_instance(gen.load(path), BnBConfig(threads=1))
        objs.append(sol.objective)
    SOLVED.append((inst, sol, {}))
    same_bytes = paths[0].read_bytes() == paths[1].read_bytes()
    ok = same_bytes and abs(objs[0] - objs[1]) <= 1e-9
    report(capsys, 10, ok, f"identical files {same_bytes}, objective difference {abs(objs[0] - objs[1]):.1e}")


def test_c7_all_solutions_feasible(small_batch, protocol_batch, capsys):
    # gathers every solution produced above; the shared batches make it usable on its own too
    seen = {id(s) for _, s, _ in SOLVED}
    pool = SOLVED + [(r["inst"], r["sol"], {}) for r in small_batch[0] if id(r["sol"]) not in seen]
    pool += [t for t in protocol_batch[1] if id(t[1]) not in seen]
    worst, bad = 0.0, 0
    for inst, sol, opts in pool:
        rep = validate_solution(inst, sol, normalize_instance(inst), **opts)
        worst = max(worst, rep.max_violation())
        bad += bool(rep.above(1e-5))
    report(capsys, 7, bad == 0, f"{len(pool)} solutions, worst violation {worst:.1e}")
