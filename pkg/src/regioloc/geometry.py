"""Norms, demand regions and the big-M constants shared by the model builders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NORMS = (1, 2, 3, 4, math.inf)


class GeometryError(ValueError):
    pass


def parse_norm(value) -> float:
    """Map ``1..4``, ``inf``/``"inf"`` to a supported norm tag."""
    if isinstance(value, str):
        value = value.strip().lower()
        if value in ("inf", "infinity", "max"):
            return math.inf
        value = float(value)
    tau = float(value)
    if tau not in NORMS:
        raise GeometryError(f"unsupported norm l{value}; expected one of 1, 2, 3, 4, inf")
    return math.inf if math.isinf(tau) else int(tau)


def norm_label(tau) -> str | int:
    return "inf" if math.isinf(tau) else int(tau)


def eval_norm(z, tau) -> float:
    z = np.asarray(z, dtype=float)
    tau = parse_norm(tau)
    if z.size == 0:
        return 0.0
    if math.isinf(tau):
        return float(np.max(np.abs(z)))
    return float(np.linalg.norm(z, ord=tau))


def eval_norm_rows(Z: np.ndarray, tau) -> np.ndarray:
    """Row-wise norm of a 2-D array."""
    tau = parse_norm(tau)
    if math.isinf(tau):
        return np.max(np.abs(Z), axis=-1)
    return np.linalg.norm(Z, ord=tau, axis=-1)


@dataclass(frozen=True)
class SOCConstraint:
    """``||R z + T||_2 <= c^T z + f``."""

    R: tuple
    T: tuple
    c: tuple
    f: float

    @classmethod
    def from_arrays(cls, R, T, c, f) -> "SOCConstraint":
        R = np.atleast_2d(np.asarray(R, dtype=float))
        return cls(
            tuple(map(tuple, R.tolist())),
            tuple(np.asarray(T, dtype=float).ravel().tolist()),
            tuple(np.asarray(c, dtype=float).ravel().tolist()),
            float(f),
        )

    def arrays(self):
        return np.array(self.R, dtype=float), np.array(self.T), np.array(self.c), self.f

    def violation(self, x) -> float:
        R, T, c, f = self.arrays()
        return float(np.linalg.norm(R @ x + T) - (c @ x + f))


@dataclass(frozen=True)
class Region:
    """An l_tau ball (optionally cut by extra SOC constraints) holding one region's demand."""

    center: tuple
    radius: float
    ball_norm: float = 2
    transport_norm: float = 2
    weight: float = 1.0
    extra_soc: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "ball_norm", parse_norm(self.ball_norm))
        object.__setattr__(self, "transport_norm", parse_norm(self.transport_norm))
        object.__setattr__(self, "extra_soc", tuple(self.extra_soc))
        if not all(math.isfinite(v) for v in self.center):
            raise GeometryError("region center must be finite")
        if not self.radius > 0:
            raise GeometryError(f"region radius must be positive, got {self.radius}")
        if not self.weight > 0:
            raise GeometryError(f"region weight must be positive, got {self.weight}")
        d = len(self.center)
        for con in self.extra_soc:
            if len(con.c) != d or any(len(row) != d for row in con.R) or len(con.T) != len(con.R):
                raise GeometryError("extra SOC constraint dimensions do not match the region")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        # every l_tau ball with tau >= 1 sits in the l_inf ball of the same radius
        return self.c - self.radius, self.c + self.radius


def contains(region: Region, x, tol: float = 1e-9) -> bool:
    x = np.asarray(x, dtype=float)
    if x.shape != (region.dim,):
        raise GeometryError(f"point of shape {x.shape} does not match region dimension {region.dim}")
    if eval_norm(x - region.c, region.ball_norm) > region.radius + tol:
        return False
    return all(con.violation(x) <= tol for con in region.extra_soc)


def membership_violation(region: Region, x) -> float:
    """Largest constraint excess of ``x`` (0 when inside)."""
    x = np.asarray(x, dtype=float)
    v = eval_norm(x - region.c, region.ball_norm) - region.radius
    for con in region.extra_soc:
        v = max(v, con.violation(x))
    return max(v, 0.0)


def check_nonempty(region: Region) -> None:
    """Raise if ball and extra SOC constraints have empty intersection."""
    if not region.extra_soc:
        return
    from . import conic, socp

    prob = conic.ConicProblem()
    a = prob.add_vars("a", region.dim)
    conic.region_membership(prob, a, region)
    sol = socp.solve(prob)
    if sol.status != socp.Status.OPTIMAL:
        raise GeometryError(f"region is empty (feasibility solve returned {sol.status.value})")


def boundary_point(region: Region, direction) -> np.ndarray:
    """Point where the ray from the center along ``direction`` leaves the region.

    Plain balls are handled in closed form; extra SOC cuts fall back to bisection,
    which needs the center to lie in the region.
    """
    u = np.asarray(direction, dtype=float)
    u = u / eval_norm(u, region.ball_norm)
    hi = region.radius
    if not region.extra_soc:
        return region.c + hi * u
    c = region.c
    if not contains(region, c, 1e-12):
        raise GeometryError("boundary search needs the center inside the region")
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if contains(region, c + mid * u, 0.0):
            lo = mid
        else:
            hi = mid
    return c + lo * u


def boundary_points(region: Region, angles: np.ndarray) -> np.ndarray:
    """Planar boundary points for an array of polar angles (vectorized for plain balls)."""
    if region.dim != 2:
        raise GeometryError("angular boundary parametrisation is planar only")
    U = np.column_stack([np.cos(angles), np.sin(angles)])
    if region.extra_soc:
        return np.array([boundary_point(region, u) for u in U])
    U = U / eval_norm_rows(U, region.ball_norm)[:, None]
    return region.c + region.radius * U


def sample_region(region: Region, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples by rejection from the enclosing box."""
    lo, hi = region.box()
    out = []
    count = 0
    while count < n:
        batch = rng.uniform(lo, hi, size=(max(2 * (n - count), 64), region.dim))
        keep = eval_norm_rows(batch - region.c, region.ball_norm) <= region.radius
        for con in region.extra_soc:
            R, T, c, f = con.arrays()
            keep &= np.linalg.norm(batch @ R.T + T, axis=1) <= batch @ c + f
        batch = batch[keep]
        out.append(batch)
        count += len(batch)
    return np.concatenate(out)[:n]


def big_m_transport(regions: Sequence[Region]) -> np.ndarray:
    """Per-region constant strictly above any transport distance between two region points.

    Uses ``||v||_tau <= ||v||_1`` and the fact that an l_tau ball of radius r fits in the
    l_1 ball of radius d*r.
    """
    if not regions:
        raise GeometryError("big_m_transport needs at least one region")
    C = np.array([r.c for r in regions])
    radii = np.array([r.radius for r in regions])
    d = C.shape[1]
    dist = np.abs(C[:, None, :] - C[None, :, :]).sum(axis=2)
    bound = dist + d * (radii[:, None] + radii[None, :])
    return bound.max(axis=1) + 1.0


def big_m_l1(region_i: Region, region_j: Region) -> float:
    d = region_i.dim
    return float(np.abs(region_i.c - region_j.c).sum() + d * (region_i.radius + region_j.radius))


def balls_intersect(ri: Region, rj: Region, tol: float = 1e-7) -> bool:
    """Sound (possibly over-approximating) intersection test for two regions."""
    gap = ri.c - rj.c
    if eval_norm(gap, math.inf) > ri.radius + rj.radius:
        return False
    if ri.ball_norm == rj.ball_norm:
        return eval_norm(gap, ri.ball_norm) <= ri.radius + rj.radius + tol
    if eval_norm(gap, 1) <= min(ri.radius, rj.radius) * 2:
        # both balls contain the l1 ball of their own radius around the center
        return True
    from . import conic, socp

    prob = conic.ConicProblem()
    a = prob.add_vars("a", ri.dim)
    t = prob.add_var("t")
    conic.region_membership(prob, a, ri)
    conic.epigraph_distance(prob, a, rj.c, t, rj.ball_norm)
    prob.set_objective({t: 1.0})
    sol = socp.solve(prob, socp.SolverConfig(eps_primal=1e-8, eps_dual=1e-8, eps_gap=1e-8))
    return sol.status != socp.Status.OPTIMAL or sol.objective <= rj.radius + tol


def overlap_candidates(regions: Sequence[Region], prefs=None, threshold: float = 0.0) -> list[tuple[int, int]]:
    """Pairs ``(i, i')`` with ``i' < i`` whose regions may intersect.

    The test works on the regions alone; preference restrictions only shrink the sets,
    so the result is a sound over-approximation of the pairs with P_i and P_i' meeting.
    """
    pairs = []
    for i in range(len(regions)):
        for k in range(i):
            if balls_intersect(regions[i], regions[k]):
                pairs.append((i, k))
    return pairs
