"""RCLPP / C-RCLPP model builders, solution extraction and validation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import conic, prefs
from .geometry import Region, big_m_l1, big_m_transport, eval_norm, membership_violation, overlap_candidates
from .mibb import BnBConfig, MISolution, MIStatus, solve_mi
from .socp import ConicSolution


class ModelError(ValueError):
    pass


@dataclass
class Instance:
    regions: list
    prefs: list
    p: int = 1
    threshold: float = 0.0
    collocation: bool = False
    scenario: str = "custom"
    seed: int | None = None
    pref_family: str | None = None
    config: dict = field(default_factory=dict)
    bounds: list | None = None  # stored (LB, UB) per region; None entries are computed

    def __post_init__(self):
        self.regions = list(self.regions)
        self.prefs = list(self.prefs) if self.prefs is not None else [None] * len(self.regions)
        self.validate()

    @property
    def n(self) -> int:
        return len(self.regions)

    @property
    def dim(self) -> int:
        return self.regions[0].dim

    def validate(self) -> None:
        if not self.regions:
            raise ModelError("an instance needs at least one region")
        if len(self.prefs) != len(self.regions):
            raise ModelError(f"{len(self.prefs)} preferences for {len(self.regions)} regions")
        if int(self.p) != self.p or self.p < 1:
            raise ModelError(f"facility count must be a positive integer, got {self.p}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ModelError(f"threshold must lie in [0, 1], got {self.threshold}")
        if len({r.dim for r in self.regions}) != 1:
            raise ModelError("all regions must share one dimension")
        if self.threshold > 0 and any(pr is None for pr in self.prefs):
            raise ModelError("a positive threshold needs a preference for every region")
        if self.bounds is not None and len(self.bounds) != len(self.regions):
            raise ModelError(f"{len(self.bounds)} stored bounds for {len(self.regions)} regions")

    def with_threshold(self, threshold: float) -> "Instance":
        return Instance(self.regions, self.prefs, self.p, threshold, self.collocation, self.scenario,
                        self.seed, self.pref_family, dict(self.config, threshold=threshold), self.bounds)


def normalize_instance(instance: Instance) -> list:
    """Normalized preferences, or ``None`` entries when the threshold is zero."""
    if instance.threshold == 0.0:
        return [None] * instance.n
    bounds = instance.bounds or [None] * instance.n
    return [prefs.normalize(spec, region, bnd)
            for spec, region, bnd in zip(instance.prefs, instance.regions, bounds)]


@dataclass
class VarMap:
    instance: Instance
    x: list
    a: list
    d: list
    y: list | None
    z: dict
    xi: list
    collocation: bool
    weighted: bool
    norm_prefs: list

    def coords(self, u: np.ndarray, handles) -> np.ndarray:
        return np.array([[u[h.index] for h in row] for row in handles])


def _emit_regions(problem: conic.ConicProblem, instance: Instance, norm_prefs) -> tuple[list, list, list]:
    d = instance.dim
    x = [problem.add_vars(f"x[{j}]", d) for j in range(instance.p)]
    a = [problem.add_vars(f"a[{i}]", d) for i in range(instance.n)]
    xi = []
    for i, region in enumerate(instance.regions):
        conic.region_membership(problem, a[i], region)
        xi.append(prefs.emit_threshold(problem, a[i], region, norm_prefs[i], instance.threshold, f"r{i}."))
    return x, a, xi


def _emit_symmetry(problem: conic.ConicProblem, y: list, n: int, p: int) -> None:
    # facilities are interchangeable: order assignment columns lexicographically
    if p < 2 or n > 20:
        return
    scale = 2.0 ** -(n - 1)
    for j in range(p - 1):
        problem.add_ge(conic.lin_sum(scale * 2.0**i * (y[i][j] - y[i][j + 1]) for i in range(n)))


def _build(instance: Instance, collocation: bool, norm_prefs=None, weighted: bool = True,
           symmetry: bool = False) -> tuple[conic.ConicProblem, VarMap]:
    if norm_prefs is None:
        norm_prefs = normalize_instance(instance)
    prob = conic.ConicProblem()
    n, p = instance.n, instance.p
    x, a, xi = _emit_regions(prob, instance, norm_prefs)
    regions = instance.regions
    omega = [r.weight if weighted else 1.0 for r in regions]

    z = {}
    if collocation:
        for i, k in overlap_candidates(regions, norm_prefs, instance.threshold):
            zv = prob.add_var(f"z[{i}][{k}]", binary=True)
            z[(i, k)] = zv
            delta2 = big_m_l1(regions[i], regions[k])
            e = prob.add_vars(f"e[{i}][{k}]", instance.dim)
            for ek, ai, ak in zip(e, a[i], a[k]):
                prob.add_ge(ek - ai + ak)
                prob.add_ge(ek + ai - ak)
            prob.add_ge(delta2 * (1.0 - zv) - conic.lin_sum(e))

    y = None
    if p > 1:
        y = [[prob.add_var(f"y[{i}][{j}]", binary=True) for j in range(p)] for i in range(n)]
        for row in y:
            prob.add_onehot(row)
        if symmetry:
            _emit_symmetry(prob, y, n, p)

    delta1 = big_m_transport(regions)
    dvars = []
    objective = []
    for i, region in enumerate(regions):
        merged = [zv for (ii, _k), zv in z.items() if ii == i]
        row = []
        for j in range(p):
            if y is None and not merged:
                # single facility, no collocation: the epigraph variable is the distance
                dij = prob.add_var(f"d[{i}][{j}]", lb=0.0)
                conic.epigraph_distance(prob, a[i], x[j], dij, region.transport_norm)
            else:
                t = prob.add_var(f"t[{i}][{j}]")
                conic.epigraph_distance(prob, a[i], x[j], t, region.transport_norm)
                dij = prob.add_var(f"d[{i}][{j}]", lb=0.0)
                off = conic.lin_sum(merged)
                if y is not None:
                    off = off + (1.0 - y[i][j])
                prob.add_ge(dij - t + delta1[i] * off)
            row.append(dij)
            objective.append(omega[i] * dij)
        dvars.append(row)
    prob.set_objective(conic.lin_sum(objective))
    vm = VarMap(instance, x, a, dvars, y, z, xi, collocation, weighted, norm_prefs)
    return prob, vm


def build_rclpp(instance: Instance, norm_prefs=None, symmetry: bool = False):
    """Model with single allocation and weighted transport cost.

    With one facility the allocation binaries and big-M rows are dropped.
    """
    return _build(instance, False, norm_prefs, True, symmetry)


def build_crclpp(instance: Instance, norm_prefs=None, weighted: bool = False, symmetry: bool = False):
    """Collocation model: overlapping regions may share an entry point, paid once.

    The cost is unweighted unless ``weighted`` is set.
    """
    return _build(instance, True, norm_prefs, weighted, symmetry)


# solutions --------------------------------------------------------------------

@dataclass
class Solution:
    facilities: np.ndarray | None
    entries: np.ndarray | None
    assignment: list
    collocated: list
    objective: float
    status: str
    model_objective: float = math.nan
    mip_gap: float = math.nan
    best_bound: float = math.nan
    nodes: int = 0
    wall_time: float = 0.0

    @property
    def has_point(self) -> bool:
        return self.facilities is not None

    def to_dict(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()

        def num(v):
            return None if v is None or not math.isfinite(v) else float(v)

        return {
            "status": self.status,
            "objective": num(self.objective),
            "model_objective": num(self.model_objective),
            "best_bound": num(self.best_bound),
            "mip_gap": num(self.mip_gap),
            "nodes": self.nodes,
            "wall_time": self.wall_time,
            "facilities": arr(self.facilities),
            "entries": arr(self.entries),
            "assignment": list(self.assignment),
            "collocated": [list(pair) for pair in self.collocated],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Solution":
        def arr(v):
            return None if v is None else np.array(v, dtype=float)

        def num(v):
            return math.nan if v is None else float(v)

        return cls(arr(data.get("facilities")), arr(data.get("entries")), list(data.get("assignment", [])),
                   [tuple(p) for p in data.get("collocated", [])], num(data.get("objective")), data["status"],
                   num(data.get("model_objective")), num(data.get("mip_gap")), num(data.get("best_bound")),
                   int(data.get("nodes", 0)), float(data.get("wall_time", 0.0)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def coordinate_objective(instance: Instance, facilities, entries, assignment, collocated=(),
                         weighted: bool = True) -> float:
    """Transport cost recomputed from coordinates; collocated regions pay once (lowest index)."""
    merged = {i for i, k in collocated}
    total = 0.0
    for i, region in enumerate(instance.regions):
        if i in merged:
            continue
        w = region.weight if weighted else 1.0
        total += w * eval_norm(np.asarray(entries[i]) - np.asarray(facilities[assignment[i]]), region.transport_norm)
    return total


def extract_solution(varmap: VarMap, mi_solution: MISolution | ConicSolution, int_tol: float = 1e-5) -> Solution:
    """Coordinates and rounded binaries of a solved model."""
    inst = varmap.instance
    if isinstance(mi_solution, ConicSolution):
        u = mi_solution.u
        meta = dict(status="optimal" if mi_solution.ok else mi_solution.status.value,
                    model_objective=mi_solution.objective, mip_gap=0.0, best_bound=mi_solution.objective,
                    nodes=1, wall_time=mi_solution.solve_time)
    else:
        if mi_solution.incumbent is None:
            raise ModelError(f"no solution to extract (status {mi_solution.status.value})")
        u = mi_solution.incumbent.u
        meta = dict(status=mi_solution.status.value, model_objective=mi_solution.objective,
                    mip_gap=mi_solution.mip_gap, best_bound=mi_solution.best_bound,
                    nodes=mi_solution.nodes, wall_time=mi_solution.wall_time)

    def binary(h) -> int:
        v = u[h.index]
        r = round(v)
        if abs(v - r) > int_tol or r not in (0, 1):
            raise ModelError(f"binary {h.label} = {v} is not integral within {int_tol}")
        return int(r)

    X = varmap.coords(u, varmap.x)
    A = varmap.coords(u, varmap.a)
    if varmap.y is None:
        assignment = [0] * inst.n
    else:
        assignment = []
        for i, row in enumerate(varmap.y):
            bits = [binary(h) for h in row]
            if sum(bits) != 1:
                raise ModelError(f"region {i} is assigned to {sum(bits)} facilities")
            assignment.append(bits.index(1))
    for row in varmap.xi:
        for h in row.values():
            binary(h)
    collocated = sorted(pair for pair, h in varmap.z.items() if binary(h) == 1)
    obj = coordinate_objective(inst, X, A, assignment, collocated, varmap.weighted or not varmap.collocation)
    return Solution(X, A, assignment, collocated, obj, **meta)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    objective: float = math.nan

    def add(self, kind: str, index, magnitude: float) -> None:
        self.violations.append((kind, index, float(magnitude)))

    def above(self, tol: float) -> list:
        return [v for v in self.violations if v[2] > tol]

    @property
    def ok(self) -> bool:
        return not self.above(1e-5)

    def max_violation(self) -> float:
        return max((v[2] for v in self.violations), default=0.0)


def validate_solution(instance: Instance, solution: Solution, norm_prefs=None, tol: float = 1e-9,
                      weighted_collocation: bool = False) -> ValidationReport:
    """Check a solution against the model constraints, recording every excess above ``tol``."""
    rep = ValidationReport()
    if not solution.has_point:
        return rep
    n, p = instance.n, instance.p
    X = np.asarray(solution.facilities, dtype=float)
    A = np.asarray(solution.entries, dtype=float)
    if X.shape != (p, instance.dim) or A.shape != (n, instance.dim):
        rep.add("shape", None, math.inf)
        return rep
    if len(solution.assignment) != n or any(not 0 <= j < p for j in solution.assignment):
        rep.add("assignment", None, 1.0)
        return rep
    if norm_prefs is None:
        norm_prefs = normalize_instance(instance)
    for i, region in enumerate(instance.regions):
        v = membership_violation(region, A[i])
        if v > tol:
            rep.add("membership", i, v)
        if instance.threshold > 0 and norm_prefs[i] is not None:
            cell_tol = 1e-6 * (1.0 + float(np.max(np.abs(A[i]))))
            short = instance.threshold - prefs.best_value(norm_prefs[i], A[i], cell_tol)
            if short > max(tol, 1e-6):
                rep.add("preference", i, short)
    for i, k in solution.collocated:
        if not instance.collocation:
            rep.add("collocation", (i, k), math.inf)
            continue
        gap = float(np.abs(A[i] - A[k]).sum())
        if gap > max(tol, 1e-6):
            rep.add("collocation", (i, k), gap)
    weighted = weighted_collocation or not instance.collocation
    rep.objective = coordinate_objective(instance, X, A, solution.assignment, solution.collocated, weighted)
    return rep


def solve_instance(instance: Instance, config: BnBConfig | None = None, engine=None,
                   weighted_collocation: bool = False, symmetry: bool = False, progress=None,
                   norm_prefs=None) -> Solution:
    """Normalize, build, solve and extract.  Raises ``prefs.InfeasibleThreshold`` early."""
    t0 = time.perf_counter()
    config = config or BnBConfig()
    if norm_prefs is None:
        norm_prefs = normalize_instance(instance)
    if instance.collocation:
        prob, vm = build_crclpp(instance, norm_prefs, weighted_collocation, symmetry)
    else:
        prob, vm = build_rclpp(instance, norm_prefs, symmetry)
    res = solve_mi(prob, config, engine, progress)
    if res.incumbent is None:
        return Solution(None, None, [], [], math.nan, res.status.value, math.nan, math.inf, res.best_bound,
                        res.nodes, time.perf_counter() - t0)
    sol = extract_solution(vm, res, config.int_tol)
    sol.wall_time = time.perf_counter() - t0
    return sol


def solve_status_infeasible(status: str) -> bool:
    return status == MIStatus.INFEASIBLE.value
