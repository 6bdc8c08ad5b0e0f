"""Brute-force reference solvers.

These exist to check the optimization models, not to compete with them: the
grid search is slow for many regions and the enumeration refuses anything past
six regions or three facilities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import conic, prefs, socp
from .geometry import Region, boundary_points, eval_norm_rows, overlap_candidates, sample_region
from .model import Instance, normalize_instance


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Search box, points per axis and zoom rounds for ``grid_weber``."""

    lo: tuple | None = None
    hi: tuple | None = None
    resolution: int = 61
    rounds: int = 3
    zoom: float = 10.0
    boundary_samples: int = 720

    def __post_init__(self):
        if self.resolution < 2:
            raise OracleError("grid resolution must be at least 2")
        if self.rounds < 0 or self.zoom <= 1.0:
            raise OracleError("need nonnegative rounds and a zoom factor above 1")


# single facility ----------------------------------------------------------------

def _golden(f, lo: np.ndarray, hi: np.ndarray, iters: int = 60) -> np.ndarray:
    """Vectorized golden-section minimization, one bracket per row."""
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo.copy(), hi.copy()
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - g * (b - a)
        d_new = a + g * (b - a)
        c, d = c_new, d_new
        fc, fd = f(c), f(d)
    return np.minimum(fc, fd)


def region_distance(region: Region, X: np.ndarray, samples: int = 720) -> np.ndarray:
    """Transport distance from each row of ``X`` to the nearest point of a plain ball."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gap = eval_norm_rows(X - region.c, region.ball_norm)
    if region.ball_norm == 2 and region.transport_norm == 2:
        return np.maximum(gap - region.radius, 0.0)
    if region.dim != 2:
        raise OracleError("boundary search is planar only")
    out = np.zeros(len(X))
    outside = gap > region.radius
    if not outside.any():
        return out
    Xo = X[outside]
    theta = np.linspace(0.0, 2 * math.pi, samples, endpoint=False)
    B = boundary_points(region, theta)
    D = np.stack([eval_norm_rows(B - x, region.transport_norm) for x in Xo])
    k = np.argmin(D, axis=1)
    step = 2 * math.pi / samples

    def along(t):
        P = boundary_points(region, t)
        return eval_norm_rows(P - Xo, region.transport_norm)

    refined = _golden(along, theta[k] - step, theta[k] + step)
    out[outside] = np.minimum(D[np.arange(len(Xo)), k], refined)
    return out


def weber_objective(instance: Instance, X: np.ndarray, samples: int = 720) -> np.ndarray:
    X = np.atleast_2d(X)
    total = np.zeros(len(X))
    for r in instance.regions:
        total += r.weight * region_distance(r, X, samples)
    return total


def grid_weber(instance: Instance, grid: GridSpec | None = None) -> tuple[np.ndarray, float]:
    """Single-facility optimum by grid search with zooming refinement."""
    grid = grid or GridSpec()
    if instance.p != 1 or instance.threshold != 0.0:
        raise OracleError("grid_weber handles one facility without preference thresholds")
    if instance.dim != 2:
        raise OracleError("grid_weber is planar only")
    if any(r.extra_soc for r in instance.regions):
        raise OracleError("grid_weber expects plain norm balls")
    C = np.array([r.c for r in instance.regions])
    lo = np.array(grid.lo if grid.lo is not None else C.min(axis=0))
    hi = np.array(grid.hi if grid.hi is not None else C.max(axis=0))
    span = np.maximum(hi - lo, 1e-9)
    best_x, best_f = None, math.inf
    for _round in range(grid.rounds + 1):
        axes = [np.linspace(lo[q], hi[q], grid.resolution) for q in range(2)]
        P = np.array(np.meshgrid(*axes, indexing="ij")).reshape(2, -1).T
        F = weber_objective(instance, P, grid.boundary_samples)
        k = int(np.argmin(F))
        if F[k] < best_f:
            best_x, best_f = P[k], float(F[k])
        span = span / grid.zoom
        lo, hi = best_x - span / 2, best_x + span / 2
    return np.array(best_x), best_f


# enumeration ----------------------------------------------------------------------

def restricted_growth(n: int, p: int):
    """Assignments up to relabeling of facilities: region 0 always goes to facility 0."""
    def grow(prefix, used):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for j in range(min(used + 1, p)):
            yield from grow(prefix + [j], max(used, j + 1))
    yield from grow([], 0)


def _components(members, assignment, edges):
    parent = {i: i for i in members}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_fac = {}
    for i in members:
        by_fac.setdefault(assignment[i], []).append(i)
    for group in by_fac.values():
        for i in group[1:]:
            parent[find(i)] = find(group[0])
    for i, k in edges:
        parent[find(i)] = find(k)
    comps = {}
    for i in members:
        comps.setdefault(find(i), []).append(i)
    return [tuple(sorted(c)) for c in comps.values()]


_FREE = "free"  # placeholder: cell combination not fixed yet


class _Enumerator:
    def __init__(self, instance: Instance, weighted: bool, engine, config):
        self.inst = instance
        self.weighted = weighted
        self.engine = engine
        self.config = config
        self.norm = normalize_instance(instance)
        self.pieces = []
        for i, npref in enumerate(self.norm):
            if npref is not None and isinstance(npref.spec, prefs.ProductionPreference):
                r = prefs.raw_threshold(npref, instance.threshold)
                ok = sorted(prefs.admissible_cells(npref.spec, r, npref.nonempty))
                if not ok:
                    raise prefs.InfeasibleThreshold(f"region {i}: no admissible cell combination")
                self.pieces.append(ok)
            else:
                self.pieces.append([None])
        self.cache = {}
        self.solves = 0

    def component(self, members, assignment, edges) -> float:
        facs = sorted({assignment[i] for i in members})
        relabel = {f: q for q, f in enumerate(facs)}
        key = (members, tuple(relabel[assignment[i]] for i in members), tuple(sorted(edges)))
        if key not in self.cache:
            # regions with several admissible cell combinations start unrestricted
            start = tuple(_FREE if len(self.pieces[i]) > 1 else self.pieces[i][0] for i in members)
            self.cache[key] = self._search(members, key[1], edges, start, math.inf)
        return self.cache[key]

    def _search(self, members, facs, edges, combo, best) -> float:
        """Depth-first search over cell combinations, pruned by the relaxation values."""
        value, points = self._solve(members, facs, edges, combo)
        if value >= best:
            return best
        for pos, (i, cells) in enumerate(zip(members, combo)):
            if cells is _FREE and not self._admissible(i, points[i]):
                break
        else:
            return value
        for cells in self.pieces[i]:
            best = self._search(members, facs, edges, combo[:pos] + (cells,) + combo[pos + 1:], best)
        return best

    def _admissible(self, i, point) -> bool:
        spec = self.norm[i].spec
        tol = 1e-9 * (1.0 + float(np.max(np.abs(point))))
        return any(all(spec.factors[f].cells[l].excess(point) <= tol for f, l in enumerate(cells))
                   for cells in self.pieces[i])

    def _solve(self, members, facs, edges, combo):
        inst = self.inst
        prob = conic.ConicProblem()
        x = [prob.add_vars(f"x{q}", inst.dim) for q in range(max(facs) + 1)]
        a = {}
        for i, cells in zip(members, combo):
            region = inst.regions[i]
            a[i] = prob.add_vars(f"a{i}", inst.dim)
            conic.region_membership(prob, a[i], region)
            npref = self.norm[i]
            if cells is _FREE:
                continue
            if cells is not None:
                for f, l in enumerate(cells):
                    A, b = npref.spec.factors[f].cells[l].arrays()
                    for row, bk in zip(A, b):
                        prob.add_ge(bk - conic.lin_sum(float(q) * ak for q, ak in zip(row, a[i])))
            elif npref is not None:
                prefs.emit_threshold(prob, a[i], region, npref, inst.threshold, f"r{i}.")
        paid_by = set()
        for i, k in edges:
            paid_by.add(i)
            for ai, ak in zip(a[i], a[k]):
                prob.add_eq(ai - ak)
        terms = []
        for i, q in zip(members, facs):
            if i in paid_by:
                continue
            region = inst.regions[i]
            t = prob.add_var(f"t{i}", lb=0.0)
            conic.epigraph_distance(prob, a[i], x[q], t, region.transport_norm)
            terms.append((region.weight if self.weighted else 1.0) * t)
        prob.set_objective(conic.lin_sum(terms))
        self.solves += 1
        sol = socp.solve(prob, self.config, self.engine)
        if sol.status is socp.Status.INFEASIBLE:
            return math.inf, None
        if sol.status is not socp.Status.OPTIMAL and not sol.near_optimal(1e-6, 1e-6):
            raise OracleError(f"subproblem solve ended with status {sol.status.value}")
        points = {i: np.array([sol.u[h.index] for h in a[i]]) for i in members}
        return float(sol.objective), points


@dataclass
class Enumeration:
    objective: float
    assignment: tuple | None
    collocated: tuple
    subproblems: int


def enumerate_best(instance: Instance, p: int | None = None, engine="ipm",
                   weighted_collocation: bool = False, config: socp.SolverConfig | None = None) -> Enumeration:
    """Exhaustive search over assignments (and collocation patterns) with exact subproblems."""
    p = instance.p if p is None else p
    n = instance.n
    if n > 6 or p > 3:
        raise OracleError(f"enumeration is limited to n <= 6 and p <= 3 (got n={n}, p={p})")
    if isinstance(engine, str):
        engine = socp.get_engine(engine)
    config = config or socp.SolverConfig(eps_primal=1e-9, eps_dual=1e-9, eps_gap=1e-9)
    weighted = weighted_collocation or not instance.collocation
    en = _Enumerator(instance, weighted, engine, config)
    cands = overlap_candidates(instance.regions) if instance.collocation else []
    members = tuple(range(n))
    best = Enumeration(math.inf, None, (), 0)
    for assignment in restricted_growth(n, p):
        for mask in itertools.product((0, 1), repeat=len(cands)):
            edges = tuple(e for e, on in zip(cands, mask) if on)
            total = 0.0
            for comp in _components(members, assignment, edges):
                sub = tuple(e for e in edges if e[0] in comp)
                total += en.component(comp, assignment, sub)
                if total >= best.objective:
                    break
            if total < best.objective:
                best = Enumeration(total, assignment, edges, 0)
    best.subproblems = en.solves
    return best


def enumerate_assignments(instance: Instance, p: int | None = None, engine="ipm",
                          weighted_collocation: bool = False) -> float:
    """Optimal objective over all assignments; ``inf`` when nothing is feasible."""
    return enumerate_best(instance, p, engine, weighted_collocation).objective


# normalization ----------------------------------------------------------------------

def sample_normalize(pref, region: Region, samples: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Range of the preference over uniform samples of the region; sits inside the exact range."""
    if samples < 10_000:
        raise OracleError("use at least 10^4 samples")
    pts = sample_region(region, samples, np.random.default_rng(seed))
    vals = pref.evaluate_many(pts)
    return float(vals.min()), float(vals.max())
