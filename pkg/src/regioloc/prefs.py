"""Regional preference functions: evaluation, rescaling to [0, 1], threshold constraints.

Three shapes are supported:

* ``LinearPreference``      ``gamma^T x + gamma0``
* ``DistancePreference``    ``-sum_k lambda_k ||B_k - x||``
* ``ProductionPreference``  Cobb-Douglas, CES or Leontief of piecewise-constant
  feature layers (``Subdivision``); each layer maps a point to the value of the
  cell holding it.

Because the feature layers are constant on cells, a production preference is
constant on each combination of cells, and threshold constraints reduce to
forbidding the combinations whose value falls short.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import conic
from .geometry import Region, boundary_points, eval_norm, eval_norm_rows, parse_norm


class PreferenceError(ValueError):
    pass


class InfeasibleThreshold(PreferenceError):
    """No point of the region reaches the requested normalized preference."""


CELL_TOL = 1e-9


@dataclass(frozen=True)
class Cell:
    """``{z : A z <= b}`` (intersected with the region by the caller)."""

    A: tuple
    b: tuple

    @classmethod
    def from_arrays(cls, A, b) -> "Cell":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(tuple(map(tuple, A.tolist())), tuple(np.asarray(b, dtype=float).ravel().tolist()))

    def arrays(self):
        return np.array(self.A, dtype=float), np.array(self.b, dtype=float)

    def excess(self, x) -> float:
        A, b = self.arrays()
        return float(np.max(A @ np.asarray(x, dtype=float) - b))


@dataclass(frozen=True)
class Subdivision:
    cells: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.cells) != len(self.values) or not self.cells:
            raise PreferenceError("a subdivision needs one value per cell")
        if min(self.values) <= 0:
            raise PreferenceError("cell values must be positive")

    def cells_containing(self, x, tol: float = CELL_TOL) -> list[int]:
        return [l for l, cell in enumerate(self.cells) if cell.excess(x) <= tol]

    def locate(self, x, tol: float = CELL_TOL) -> int:
        """Index of the lowest-numbered cell holding ``x``."""
        for l, cell in enumerate(self.cells):
            if cell.excess(x) <= tol:
                return l
        raise PreferenceError(f"point {np.asarray(x).tolist()} lies in no cell of the subdivision")

    def value(self, x) -> float:
        return self.values[self.locate(x)]


@dataclass(frozen=True)
class LinearPreference:
    gamma: tuple
    gamma0: float = 0.0
    family = "L"

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))

    def evaluate(self, x) -> float:
        return float(np.dot(self.gamma, x) + self.gamma0)

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        return X @ np.array(self.gamma) + self.gamma0


@dataclass(frozen=True)
class DistancePreference:
    points: tuple
    lambdas: tuple
    norm: float = 2
    family = "D"

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(tuple(float(v) for v in p) for p in self.points))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "norm", parse_norm(self.norm))
        lam = np.array(self.lambdas)
        if len(lam) != len(self.points) or not len(lam):
            raise PreferenceError("distance preference needs one weight per reference point")
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
            raise PreferenceError("reference-point weights must lie on the simplex")

    def evaluate(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return -sum(l * eval_norm(np.array(B) - x, self.norm) for B, l in zip(self.points, self.lambdas))

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(len(X))
        for B, l in zip(self.points, self.lambdas):
            out -= l * eval_norm_rows(X - np.array(B), self.norm)
        return out


@dataclass(frozen=True)
class ProductionPreference:
    kind: str
    factors: tuple
    betas: tuple
    tau_ces: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.upper())
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        beta = np.array(self.betas)
        if self.kind not in ("CD", "CES", "LF"):
            raise PreferenceError(f"unknown production model {self.kind}")
        if len(beta) != len(self.factors) or not len(beta):
            raise PreferenceError("production preference needs one beta per factor")
        if self.kind == "LF":
            if np.any(beta <= 0):
                raise PreferenceError("Leontief betas must be positive")
        elif np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise PreferenceError("Cobb-Douglas/CES betas must lie on the simplex")
        if self.kind == "CES" and not 0 < self.tau_ces <= 1:
            raise PreferenceError("CES exponent must lie in (0, 1]")

    @property
    def family(self) -> str:
        return self.kind

    def combine(self, g: Sequence[float]) -> float:
        g = np.asarray(g, dtype=float)
        beta = np.array(self.betas)
        if self.kind == "CD":
            return float(np.prod(g**beta))
        if self.kind == "CES":
            return float(np.sum(beta * g**self.tau_ces) ** (1.0 / self.tau_ces))
        return float(np.min(g / beta))

    def combo_value(self, combo: Sequence[int]) -> float:
        return self.combine([f.values[l] for f, l in zip(self.factors, combo)])

    def combos(self):
        return itertools.product(*[range(len(f.cells)) for f in self.factors])

    def evaluate(self, x) -> float:
        return self.combine([f.value(x) for f in self.factors])

    def evaluate_many(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.evaluate(x) for x in X])


PreferenceSpec = LinearPreference | DistancePreference | ProductionPreference


def evaluate(spec, x) -> float:
    """Raw preference value of point ``x``."""
    return spec.evaluate(x)


@dataclass
class NormalizedPreference:
    spec: object
    lb: float
    ub: float
    nonempty: tuple = field(default=())

    def __post_init__(self):
        if not self.ub - self.lb >= 1e-9:
            raise PreferenceError(f"degenerate (constant) preference: LB={self.lb}, UB={self.ub}")

    def rescale(self, value):
        return (value - self.lb) / (self.ub - self.lb)

    def normalized(self, x) -> float:
        return float(self.rescale(self.spec.evaluate(x)))


# normalization ---------------------------------------------------------------

def _tight_config():
    from .socp import SolverConfig

    return SolverConfig(eps_primal=1e-9, eps_dual=1e-9, eps_gap=1e-9)


def _dual_norm_value(v: np.ndarray, tau) -> float:
    if math.isinf(tau):
        return float(np.abs(v).sum())
    if tau == 1:
        return float(np.abs(v).max())
    q = tau / (tau - 1.0)
    return float(np.sum(np.abs(v) ** q) ** (1.0 / q))


def _linear_extreme(region: Region, direction: np.ndarray) -> float:
    """``max direction^T x`` over the region."""
    if not region.extra_soc:
        return float(direction @ region.c + region.radius * _dual_norm_value(direction, region.ball_norm))
    from . import socp

    prob = conic.ConicProblem()
    a = prob.add_vars("a", region.dim)
    conic.region_membership(prob, a, region)
    prob.set_objective(conic.lin_sum(-float(g) * ak for g, ak in zip(direction, a)))
    sol = socp.solve(prob, _tight_config())
    if not sol.ok:
        raise PreferenceError(f"support-function solve failed ({sol.status.value})")
    return -sol.objective


def _distance_upper(spec: DistancePreference, region: Region) -> float:
    from . import socp

    prob = conic.ConicProblem()
    a = prob.add_vars("a", region.dim)
    conic.region_membership(prob, a, region)
    ts = []
    for k, B in enumerate(spec.points):
        t = prob.add_var(f"t[{k}]")
        conic.epigraph_distance(prob, list(B), a, t, spec.norm)
        ts.append(t)
    prob.set_objective(conic.lin_sum(l * t for l, t in zip(spec.lambdas, ts)))
    sol = socp.solve(prob, _tight_config())
    if not sol.ok:
        raise PreferenceError(f"distance-preference UB solve failed ({sol.status.value})")
    point = np.array([sol.u[h.index] for h in a])
    return max(-sol.objective, spec.evaluate(point))


def _golden_min(f, lo: float, hi: float, tol: float = 1e-12) -> tuple[float, float]:
    g = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - g * (hi - lo), lo + g * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - g * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + g * (hi - lo)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


def boundary_minimum(func, region: Region, samples: int = 3600) -> float:
    """Minimum of ``func`` over the region boundary: dense angular sweep + golden section.

    For concave ``func`` the minimum over a compact convex planar set sits on the
    boundary, so a one-parameter search is enough.
    """
    if region.dim != 2:
        rng = np.random.default_rng(0)
        U = rng.normal(size=(samples * 10, region.dim))
        U /= eval_norm_rows(U, region.ball_norm)[:, None]
        return float(np.min(func(region.c + region.radius * U)))
    angles = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    vals = func(boundary_points(region, angles))
    best = int(np.argmin(vals))
    step = 2 * np.pi / samples

    def along(theta):
        return float(func(boundary_points(region, np.array([theta])))[0])

    _, refined = _golden_min(along, angles[best] - step, angles[best] + step)
    return float(min(vals[best], refined))


def combo_interior(region: Region, cells: Sequence[Cell]) -> float:
    """Largest margin ``s`` such that a point sits ``s`` inside every cell and the region."""
    from . import socp

    prob = conic.ConicProblem()
    a = prob.add_vars("a", region.dim)
    s = prob.add_var("s", lb=0.0, ub=region.radius)
    for cell in cells:
        A, b = cell.arrays()
        for row, bk in zip(A, b):
            nrm = float(np.linalg.norm(row))
            prob.add_ge(bk - conic.lin_sum(float(r) * ak for r, ak in zip(row, a)) - nrm * s)
    t = prob.add_var("t")
    prob.add_eq(t + s - region.radius)
    conic.epigraph_norm(prob, [ak - ck for ak, ck in zip(a, region.center)], t, region.ball_norm)
    for con in region.extra_soc:
        R, T, c, f = con.arrays()
        head = conic.lin_sum(float(ck) * ak for ck, ak in zip(c, a)) + f - s
        body = [conic.lin_sum(float(r) * ak for r, ak in zip(row, a)) + Tk for row, Tk in zip(R, T)]
        prob.add_soc([head] + body)
    prob.set_objective({s: -1.0})
    # touching cells have margin exactly 0; first-order accuracy would blur that
    sol = socp.solve(prob, socp.SolverConfig(eps_primal=1e-8, eps_dual=1e-8, eps_gap=1e-8), "ipm")
    if sol.status is socp.Status.ITER_LIMIT:
        sol = socp.solve(prob, _tight_config())
    if sol.status is socp.Status.INFEASIBLE:
        return -1.0
    return -sol.objective


def nonempty_combos(spec: ProductionPreference, region: Region, rel_tol: float = 1e-5) -> tuple:
    """Cell combinations whose intersection with the region has nonempty interior."""
    out = []
    for combo in spec.combos():
        cells = [f.cells[l] for f, l in zip(spec.factors, combo)]
        if combo_interior(region, cells) > rel_tol * region.radius:
            out.append(tuple(combo))
    return tuple(out)


def normalize(spec, region: Region, bounds=None) -> NormalizedPreference:
    """Bounds of the preference over the region, used to rescale it to [0, 1].

    ``bounds`` overrides the computed ``(LB, UB)``; production preferences still
    enumerate their nonempty cell combinations.
    """
    if bounds is not None:
        nonempty = nonempty_combos(spec, region) if isinstance(spec, ProductionPreference) else ()
        return NormalizedPreference(spec, float(bounds[0]), float(bounds[1]), nonempty)
    if isinstance(spec, LinearPreference):
        g = np.array(spec.gamma)
        ub = spec.gamma0 + _linear_extreme(region, g)
        lb = spec.gamma0 - _linear_extreme(region, -g)
        return NormalizedPreference(spec, lb, ub)
    if isinstance(spec, DistancePreference):
        ub = _distance_upper(spec, region)
        lb = boundary_minimum(spec.evaluate_many, region)
        return NormalizedPreference(spec, lb, ub)
    if isinstance(spec, ProductionPreference):
        combos = nonempty_combos(spec, region)
        if not combos:
            raise PreferenceError("no cell combination intersects the region")
        vals = [spec.combo_value(c) for c in combos]
        return NormalizedPreference(spec, min(vals), max(vals), combos)
    raise PreferenceError(f"unknown preference type {type(spec).__name__}")


def raw_threshold(norm_pref: NormalizedPreference, threshold: float) -> float:
    return norm_pref.lb + threshold * (norm_pref.ub - norm_pref.lb)


def admissible_cells(spec: ProductionPreference, r: float, nonempty=None) -> set:
    """Cell-index tuples whose production value reaches ``r``."""
    combos = spec.combos() if nonempty is None else nonempty
    slack = 1e-9 * max(1.0, abs(r))
    return {tuple(c) for c in combos if spec.combo_value(c) >= r - slack}


def best_value(norm_pref: NormalizedPreference, x, tol: float = 1e-6) -> float:
    """Normalized preference at ``x`` taking the best cell assignment within ``tol``.

    Points on cell boundaries may be claimed by any adjacent cell; the conic model
    allows this, so validation does too.
    """
    spec = norm_pref.spec
    if not isinstance(spec, ProductionPreference):
        return norm_pref.normalized(x)
    options = [f.cells_containing(x, tol) for f in spec.factors]
    allowed = set(norm_pref.nonempty) if norm_pref.nonempty else None
    vals = [spec.combo_value(c) for c in itertools.product(*options) if allowed is None or c in allowed]
    if not vals:
        return -np.inf
    return float(norm_pref.rescale(max(vals)))


def cell_big_m(spec: ProductionPreference, region: Region) -> float:
    """Single constant dominating every cell row over the region's enclosing box."""
    c_inf = float(np.max(np.abs(region.c)))
    worst = 0.0
    for f in spec.factors:
        for cell in f.cells:
            A, b = cell.arrays()
            worst = max(worst, float(np.max(np.abs(A).sum(axis=1) * (c_inf + region.radius) + np.abs(b))))
    return worst + 1.0


def row_big_m(row: np.ndarray, rhs: float, region: Region) -> float:
    """``max row.z - rhs`` over the ball: the tightest valid deactivation constant."""
    return float(row @ region.c - rhs + region.radius * _dual_norm_value(row, region.ball_norm))


def emit_threshold(problem: conic.ConicProblem, a: Sequence, region: Region,
                   norm_pref: NormalizedPreference | None, threshold: float, prefix: str = "") -> dict:
    """Add ``normalized preference(a) >= threshold`` to the problem.

    Returns the created cell-selector binaries as ``{(factor, cell): VarHandle}``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise PreferenceError("threshold must lie in [0, 1]")
    if threshold == 0.0 or norm_pref is None:
        return {}
    spec = norm_pref.spec
    r = raw_threshold(norm_pref, threshold)
    if isinstance(spec, LinearPreference):
        problem.add_ge(conic.lin_sum(g * ak for g, ak in zip(spec.gamma, a)) + spec.gamma0 - r)
        return {}
    if isinstance(spec, DistancePreference):
        ts = []
        for k, B in enumerate(spec.points):
            t = problem.add_var(f"{prefix}tB[{k}]")
            conic.epigraph_distance(problem, list(B), a, t, spec.norm)
            ts.append(t)
        problem.add_ge(-r - conic.lin_sum(l * t for l, t in zip(spec.lambdas, ts)))
        return {}
    nonempty = norm_pref.nonempty or tuple(spec.combos())
    ok = admissible_cells(spec, r, nonempty)
    if not ok:
        best = max(spec.combo_value(c) for c in nonempty)
        raise InfeasibleThreshold(
            f"{prefix or 'region'}: no cell combination reaches normalized preference {threshold} "
            f"(raw {r:.6g}; best available {best:.6g}, i.e. {norm_pref.rescale(best):.6g} normalized)")
    xi = {}
    for f, sub in enumerate(spec.factors):
        group = []
        for l, cell in enumerate(sub.cells):
            v = problem.add_var(f"{prefix}xi[{f}][{l}]", binary=True)
            xi[(f, l)] = v
            group.append(v)
            A, b = cell.arrays()
            for row, bk in zip(A, b):
                # row . a <= b + M (1 - xi); rows slack over the whole ball are dropped
                big_m = row_big_m(row, bk, region)
                if big_m <= 0.0:
                    continue
                problem.add_ge(bk + big_m * (1.0 - v) - conic.lin_sum(float(q) * ak for q, ak in zip(row, a)))
        problem.add_onehot(group)
    m = len(spec.factors)
    for combo in spec.combos():
        if tuple(combo) in ok:
            continue
        problem.add_ge((m - 1.0) - conic.lin_sum(xi[(f, l)] for f, l in enumerate(combo)))
    return xi
