"""Operator-splitting (ADMM) solver for ``min c^T u  s.t.  A u + s = b, s in K``.

The iteration follows the OSQP/COSMO splitting: each step solves one quasi-definite
KKT system with a cached sparse factorization, then projects onto the cone.  The
dual vector ``y`` returned to callers lives in the dual cone and satisfies
``A^T y + c = 0`` at optimality.

Engines are pluggable: anything with ``prepare(std, config)`` returning an object
with ``solve(b=None, warm=None)`` can replace the built-in one.  ``ExternalEngine``
runs an executable that reads the text IR dump and writes a result file.
"""

from __future__ import annotations

import enum
import logging
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conic import (RESULT_HEADER, Cone, ConeKind, ConicError, ConicProblem, StandardForm,
                    read_ir, write_ir)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


@dataclass
class SolverConfig:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    eps_gap: float = 1e-6
    eps_infeasible: float = 1e-7
    max_iter: int = 100_000
    rho: float = 1.0
    alpha: float = 1.6
    scaling: bool = True
    sigma: float = 1e-6
    adaptive_rho: bool = True
    check_every: int = 10
    time_limit: float | None = None

    def __post_init__(self):
        if min(self.eps_primal, self.eps_dual, self.eps_gap, self.eps_infeasible) <= 0:
            raise ValueError("solver tolerances must be positive")
        if not 1.0 <= self.alpha < 2.0:
            raise ValueError("over-relaxation must lie in [1, 2)")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass
class ConicSolution:
    status: Status
    u: np.ndarray
    y: np.ndarray
    s: np.ndarray
    objective: float
    residuals: tuple = (np.inf, np.inf, np.inf)
    iterations: int = 0
    solve_time: float = 0.0
    rho: float = 1.0
    dual_objective: float = np.nan

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def near_optimal(self, eps_primal: float, eps_dual: float) -> bool:
        """Stopped early but primal and dual feasible to tolerance."""
        return self.ok or (self.status is Status.ITER_LIMIT and self.residuals[0] <= eps_primal
                           and self.residuals[1] <= eps_dual)


# cone projections -----------------------------------------------------------

def _project_soc_rows(X: np.ndarray) -> np.ndarray:
    t = X[:, 0]
    x = X[:, 1:]
    nx = np.sqrt(np.einsum("ij,ij->i", x, x))
    out = X.copy()
    polar = nx <= -t
    out[polar] = 0.0
    mid = ~(polar | (nx <= t))
    if mid.any():
        a = 0.5 * (nx[mid] + t[mid])
        out[mid, 0] = a
        out[mid, 1:] = (a / nx[mid])[:, None] * x[mid]
    return out


def project_cone(s, cone: Cone) -> np.ndarray:
    """Euclidean projection of one cone segment."""
    s = np.asarray(s, dtype=float)
    if s.shape != (cone.dim,):
        raise ConicError(f"segment of length {s.size} does not match cone of dimension {cone.dim}")
    if cone.kind is ConeKind.ZERO:
        return np.zeros_like(s)
    if cone.kind is ConeKind.NONNEG:
        return np.maximum(s, 0.0)
    return _project_soc_rows(s[None, :])[0]


def project_dual_cone(s, cone: Cone) -> np.ndarray:
    if cone.kind is ConeKind.ZERO:
        return np.asarray(s, dtype=float).copy()
    return project_cone(s, cone)


class ConeProjector:
    """Vectorized projection onto a product of cones."""

    def __init__(self, cones):
        self.cones = list(cones)
        zero, nonneg, soc = [], [], {}
        r = 0
        for cone in self.cones:
            rows = np.arange(r, r + cone.dim)
            if cone.kind is ConeKind.ZERO:
                zero.append(rows)
            elif cone.kind is ConeKind.NONNEG:
                nonneg.append(rows)
            else:
                soc.setdefault(cone.dim, []).append(rows)
            r += cone.dim
        self.m = r
        self.zero = np.concatenate(zero) if zero else np.zeros(0, dtype=int)
        self.nonneg = np.concatenate(nonneg) if nonneg else np.zeros(0, dtype=int)
        self.soc = [np.vstack(blocks) for blocks in soc.values()]
        self.soc_first = np.concatenate([g[:, 0] for g in self.soc]) if self.soc else np.zeros(0, dtype=int)

    def project(self, v: np.ndarray) -> np.ndarray:
        out = v.copy()
        out[self.zero] = 0.0
        out[self.nonneg] = np.maximum(v[self.nonneg], 0.0)
        for idx in self.soc:
            out[idx] = _project_soc_rows(v[idx])
        return out

    def project_dual(self, v: np.ndarray) -> np.ndarray:
        out = self.project(v)
        out[self.zero] = v[self.zero]
        return out

    def block_mean(self, e: np.ndarray) -> np.ndarray:
        """Replace per-row scales on SOC blocks by the block mean (keeps the cone invariant)."""
        e = e.copy()
        for idx in self.soc:
            e[idx] = e[idx].mean(axis=1, keepdims=True)
        return e


# KKT system -----------------------------------------------------------------

class KKTFactor:
    """Factorization of ``[[sigma I, A^T], [A, -diag(1/rho)]]``.

    The matrix is quasi-definite, so a static-pivot LU in symmetric mode is stable;
    plain partial pivoting is the fallback.
    """

    def __init__(self, A: sp.spmatrix, rho, sigma: float, refine: int = 0):
        A = sp.csc_matrix(A)
        m, n = A.shape
        rho = np.broadcast_to(np.asarray(rho, dtype=float), (m,))
        if np.any(rho <= 0) or sigma <= 0:
            raise SolverError("KKT regularisation must be positive")
        self.n, self.m = n, m
        K = sp.bmat([[sigma * sp.identity(n), A.T], [A, sp.diags(-1.0 / rho)]], format="csc")
        self.K = K
        self.refine = refine
        try:
            self.lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options={"SymmetricMode": True})
        except RuntimeError:
            try:
                self.lu = spla.splu(K)
            except RuntimeError as exc:
                raise SolverError(f"KKT system is numerically singular: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.lu.solve(rhs)
        for _ in range(self.refine):
            x += self.lu.solve(rhs - self.K @ x)
        return x


def factorize_kkt(problem, rho=1.0, sigma: float | None = None, refine: int = 0) -> KKTFactor:
    """Factor the ADMM KKT matrix of a problem (``sigma`` defaults to ``rho``)."""
    if isinstance(problem, ConicProblem):
        problem = problem.to_standard()
    A = problem.A if isinstance(problem, StandardForm) else problem
    if sigma is None:
        sigma = float(np.min(rho))
    return KKTFactor(A, rho, sigma, refine)


# scaling --------------------------------------------------------------------

def ruiz_equilibrate(A: sp.csc_matrix, projector: ConeProjector, iters: int = 15):
    """Return ``(D, E)`` with ``E A D`` roughly unit row/column inf-norms."""
    m, n = A.shape
    D = np.ones(n)
    E = np.ones(m)
    M = sp.csc_matrix(A, copy=True)
    for _ in range(iters):
        absM = abs(M)
        col = np.asarray(absM.max(axis=0).todense()).ravel() if n else np.zeros(0)
        row = np.asarray(absM.max(axis=1).todense()).ravel() if m else np.zeros(0)
        d = 1.0 / np.sqrt(np.where(col > 1e-8, col, 1.0))
        e = 1.0 / np.sqrt(np.where(row > 1e-8, row, 1.0))
        e = projector.block_mean(e)
        d = np.clip(d, 1e-4, 1e4)
        e = np.clip(e, 1e-4, 1e4)
        M = sp.diags(e) @ M @ sp.diags(d)
        D *= d
        E *= e
    return np.clip(D, 1e-6, 1e6), np.clip(E, 1e-6, 1e6)


# ADMM engine ----------------------------------------------------------------

def _check_structure(std: StandardForm) -> None:
    m, n = std.A.shape
    if sum(c.dim for c in std.cones) != m:
        raise ConicError("cone dimensions do not partition the constraint rows")
    if std.b.shape != (m,) or std.c.shape != (n,):
        raise ConicError("objective or right-hand side has the wrong length")
    if not (np.all(np.isfinite(std.b)) and np.all(np.isfinite(std.c))):
        raise ConicError("problem data must be finite")


class AdmmSolver:
    """Prepared ADMM solver for one constraint matrix; ``b`` may change between solves."""

    def __init__(self, std: StandardForm, config: SolverConfig | None = None):
        _check_structure(std)
        self.std = std
        self.config = config or SolverConfig()
        cfg = self.config
        self.projector = ConeProjector(std.cones)
        A = sp.csc_matrix(std.A)
        m, n = A.shape
        self.m, self.n = m, n
        if cfg.scaling and m and n:
            D, E = ruiz_equilibrate(A, self.projector)
        else:
            D, E = np.ones(n), np.ones(m)
        self.D, self.E = D, E
        self.Ahat = sp.csc_matrix(sp.diags(E) @ A @ sp.diags(D))
        self.AhatT = sp.csr_matrix(self.Ahat.T)
        chat = D * std.c
        cmax = np.max(np.abs(chat)) if n else 0.0
        self.cscale = 1.0 / cmax if cmax > 1e-6 else 1.0
        self.cscale = float(np.clip(self.cscale, 1e-4, 1e4))
        self.chat = self.cscale * chat
        self.A = sp.csr_matrix(A)
        self.AT = sp.csr_matrix(A.T)
        self.eq_rows = self.projector.zero
        self._rho = cfg.rho
        self._kkt = None
        self._kkt_rho = None

    def _rho_vec(self, rho: float) -> np.ndarray:
        v = np.full(self.m, rho)
        v[self.eq_rows] = 1e3 * rho
        return v

    def _factor(self, rho: float):
        if self._kkt is None or self._kkt_rho != rho:
            self._kkt = KKTFactor(self.Ahat, self._rho_vec(rho), self.config.sigma)
            self._kkt_rho = rho
        return self._kkt

    def solve(self, b: np.ndarray | None = None, warm: ConicSolution | None = None,
              config: SolverConfig | None = None) -> ConicSolution:
        cfg = config or self.config
        t0 = time.perf_counter()
        std = self.std
        b = std.b if b is None else np.asarray(b, dtype=float)
        m, n = self.m, self.n
        D, E, cs = self.D, self.E, self.cscale
        bhat = E * b
        chat = self.chat
        proj = self.projector.project
        alpha, sigma = cfg.alpha, cfg.sigma
        rho = warm.rho if (warm is not None and cfg.adaptive_rho) else self._rho
        rho_v = self._rho_vec(rho)
        kkt = self._factor(rho)
        if warm is not None and warm.u.shape == (n,) and warm.s.shape == (m,):
            u = warm.u / D
            s = proj(warm.s * E)
            lam = -warm.y * cs / E
        else:
            u = np.zeros(n)
            s = np.zeros(m)
            lam = np.zeros(m)
        rhs = np.empty(n + m)
        b_inf = np.max(np.abs(b)) if m else 0.0
        c_inf = np.max(np.abs(std.c)) if n else 0.0
        status = Status.ITER_LIMIT
        res = (np.inf, np.inf, np.inf)
        it = 0
        check = max(1, cfg.check_every)
        adapt_every = 5 * check
        next_adapt = adapt_every
        for it in range(1, cfg.max_iter + 1):
            rhs[:n] = sigma * u - chat
            rhs[n:] = bhat - s + lam / rho_v
            sol = kkt.solve(rhs)
            ut = sol[:n]
            st = s - (sol[n:] + lam) / rho_v
            u_prev, lam_prev = u, lam
            u = alpha * ut + (1.0 - alpha) * u
            v = alpha * st + (1.0 - alpha) * s + lam / rho_v
            s = proj(v)
            lam = rho_v * (v - s)
            if it % check and it != cfg.max_iter:
                continue
            uu = D * u
            ss = s / E
            yy = -E * lam / cs
            Au = self.A @ uu
            rp = np.max(np.abs(Au + ss - b)) if m else 0.0
            ATy = self.AT @ yy
            rd = np.max(np.abs(ATy + std.c)) if n else 0.0
            pobj = float(std.c @ uu)
            dobj = float(-b @ yy)
            rp_rel = rp / (1.0 + b_inf)
            rd_rel = rd / (1.0 + c_inf)
            gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
            res = (rp_rel, rd_rel, gap)
            if rp_rel <= cfg.eps_primal and rd_rel <= cfg.eps_dual and gap <= cfg.eps_gap:
                status = Status.OPTIMAL
                break
            if self._primal_infeasible(lam - lam_prev, b, cfg.eps_infeasible):
                status = Status.INFEASIBLE
                break
            if self._dual_infeasible(u - u_prev, cfg.eps_infeasible):
                status = Status.UNBOUNDED
                break
            if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
                break
            if cfg.adaptive_rho and it >= next_adapt:
                # back off geometrically: frequent refactoring stalls degenerate problems
                new_rho = self._adapt_rho(u, s, lam, bhat, rho)
                next_adapt = it + adapt_every
                if new_rho is not None:
                    rho = new_rho
                    rho_v = self._rho_vec(rho)
                    kkt = self._factor(rho)
                    adapt_every *= 2
                    next_adapt = it + adapt_every
        self._rho = rho
        uu = D * u
        ss = s / E
        yy = -E * lam / cs
        if status is Status.INFEASIBLE:
            dy = -(E * (lam - lam_prev)) / cs
            yy = dy / max(np.max(np.abs(dy)), 1e-300)
        elif status is Status.UNBOUNDED:
            du = D * (u - u_prev)
            uu = du / max(np.max(np.abs(du)), 1e-300)
        objective = float(std.c @ uu) + getattr(std, "offset", 0.0)
        if status is Status.INFEASIBLE:
            objective = np.inf
        elif status is Status.UNBOUNDED:
            objective = -np.inf
        dual_obj = -float(b @ yy) + getattr(std, "offset", 0.0) if status is Status.OPTIMAL or \
            status is Status.ITER_LIMIT else np.nan
        return ConicSolution(status, uu, yy, ss, objective, res, it, time.perf_counter() - t0, rho, dual_obj)

    def _primal_infeasible(self, dlam: np.ndarray, b: np.ndarray, eps: float) -> bool:
        dy = -(self.E * dlam) / self.cscale
        ny = np.max(np.abs(dy)) if dy.size else 0.0
        if ny < 1e-10:
            return False
        dy = dy / ny
        if b @ dy >= -eps:
            return False
        if np.max(np.abs(self.AT @ dy)) > eps:
            return False
        return np.max(np.abs(self.projector.project_dual(dy) - dy)) <= eps

    def _dual_infeasible(self, du_hat: np.ndarray, eps: float) -> bool:
        du = self.D * du_hat
        nu = np.max(np.abs(du)) if du.size else 0.0
        if nu < 1e-10:
            return False
        du = du / nu
        if self.std.c @ du >= -eps:
            return False
        w = -(self.A @ du)
        return np.max(np.abs(self.projector.project(w) - w)) <= eps if w.size else True

    def _adapt_rho(self, u, s, lam, bhat, rho):
        Au = self.Ahat @ u
        ATl = self.AhatT @ lam
        p_den = max(np.max(np.abs(Au)), np.max(np.abs(s)), np.max(np.abs(bhat)), 1e-10)
        d_den = max(np.max(np.abs(ATl)), np.max(np.abs(self.chat)), 1e-10)
        prim = np.max(np.abs(Au + s - bhat)) / p_den
        dual = np.max(np.abs(-ATl + self.chat)) / d_den
        new = rho * np.sqrt(max(prim, 1e-12) / max(dual, 1e-12))
        new = float(np.clip(new, 1e-6, 1e6))
        if new > 5 * rho or new < rho / 5:
            return new
        return None


class BuiltinEngine:
    name = "builtin"

    def prepare(self, std: StandardForm, config: SolverConfig | None = None) -> AdmmSolver:
        return AdmmSolver(std, config)

    def solve(self, problem, config: SolverConfig | None = None) -> ConicSolution:
        return self.prepare(_standard(problem), config).solve()


class _ExternalPrepared:
    def __init__(self, engine: "ExternalEngine", std: StandardForm, config):
        self.engine, self.std, self.config = engine, std, config

    def solve(self, b=None, warm=None, config=None) -> ConicSolution:
        std = self.std if b is None else replace(self.std, b=np.asarray(b, dtype=float))
        return self.engine.run(std)


class ExternalEngine:
    """Runs ``<path> <ir-file> <result-file>`` and reads the result back."""

    def __init__(self, path: str, timeout: float | None = None):
        self.path = path
        self.timeout = timeout
        self.name = f"external:{path}"

    def prepare(self, std: StandardForm, config: SolverConfig | None = None):
        return _ExternalPrepared(self, std, config)

    def solve(self, problem, config: SolverConfig | None = None) -> ConicSolution:
        return self.run(_standard(problem))

    def run(self, std: StandardForm) -> ConicSolution:
        with tempfile.TemporaryDirectory() as tmp:
            ir = os.path.join(tmp, "problem.ir")
            out = os.path.join(tmp, "result.txt")
            write_ir(std, ir)
            t0 = time.perf_counter()
            proc = subprocess.run([self.path, ir, out], capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0 or not os.path.exists(out):
                raise SolverError(f"external engine failed ({proc.returncode}): {proc.stderr.strip()}")
            sol = read_result(out)
            sol.solve_time = time.perf_counter() - t0
            sol.objective += getattr(std, "offset", 0.0) if sol.ok else 0.0
            return sol


def write_result(sol: ConicSolution, path) -> None:
    lines = [
        RESULT_HEADER,
        f"status {sol.status.value}",
        f"objective {float(sol.objective)!r}",
        f"iterations {sol.iterations}",
        "residuals " + " ".join(repr(float(r)) for r in sol.residuals),
        "u " + " ".join(repr(float(v)) for v in sol.u),
        "y " + " ".join(repr(float(v)) for v in sol.y),
        "s " + " ".join(repr(float(v)) for v in sol.s),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_result(path) -> ConicSolution:
    fields = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RESULT_HEADER:
            raise SolverError(f"{path}: not a regioloc result file")
        for ln in fh:
            key, _, rest = ln.strip().partition(" ")
            fields[key] = rest
    vec = lambda k: np.array([float(x) for x in fields.get(k, "").split()])  # noqa: E731
    return ConicSolution(
        status=Status(fields["status"]),
        u=vec("u"), y=vec("y"), s=vec("s"),
        objective=float(fields.get("objective", "nan")),
        residuals=tuple(vec("residuals")) or (np.inf,) * 3,
        iterations=int(fields.get("iterations", 0)),
    )


def _standard(problem) -> StandardForm:
    if isinstance(problem, ConicProblem):
        if problem.integer:
            raise ConicError("continuous solve called on a problem with integer variables; relax or fix them first")
        std = problem.to_standard()
        return std
    return problem


def get_engine(spec: str | None = None, default: str = "builtin"):
    """``builtin`` (ADMM), ``ipm`` or ``external:<path>``.

    Falls back to ``$REGIOLOC_ENGINE``, then to ``default``.
    """
    spec = spec or os.environ.get("REGIOLOC_ENGINE") or default
    if spec == "builtin":
        return BuiltinEngine()
    if spec == "ipm":
        from .ipm import IpmEngine

        return IpmEngine()
    if spec.startswith("external:"):
        return ExternalEngine(spec.split(":", 1)[1])
    raise ValueError(f"unknown engine {spec!r}")


def solve(problem, config: SolverConfig | None = None, engine=None) -> ConicSolution:
    """Solve a continuous conic problem (no integrality marks).

    ``engine`` is an engine object or a name accepted by ``get_engine``.
    """
    if engine is None or isinstance(engine, str):
        engine = get_engine(engine)
    return engine.solve(problem, config)
