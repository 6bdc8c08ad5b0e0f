"""Branch-and-bound over binary variables with conic relaxations as node bounds.

Binary fixings only touch the right-hand side of the bound rows compiled by
``ConicProblem.to_standard``, so every node reuses the engine's prepared solver
(and with it the cached KKT factorization).
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .conic import ConeKind, ConicProblem, StandardForm
from .socp import ConicSolution, SolverConfig, Status, get_engine

log = logging.getLogger(__name__)


class NodeSelection(enum.Enum):
    BEST_BOUND = "best_bound"
    DEPTH_FIRST_PLUNGE = "depth_first_plunge"


class Branching(enum.Enum):
    MOST_FRACTIONAL = "most_fractional"
    LABEL_PRIORITY = "label_priority"


class MIStatus(enum.Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    NO_SOLUTION = "no_solution"


@dataclass
class BnBConfig:
    rel_gap: float = 1e-4
    abs_gap: float = 1e-6
    int_tol: float = 1e-5
    time_limit: float = 3600.0
    node_limit: int = 1_000_000
    node_selection: NodeSelection = NodeSelection.BEST_BOUND
    branching: Branching = Branching.LABEL_PRIORITY
    heuristic_every: int = 10
    node_max_iter: int = 10000
    threads: int = 1
    polish: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.rel_gap <= 0 or self.int_tol <= 0:
            raise ValueError("rel_gap and int_tol must be positive")
        self.node_selection = NodeSelection(self.node_selection)
        self.branching = Branching(self.branching)


@dataclass
class MISolution:
    status: MIStatus
    incumbent: ConicSolution | None
    objective: float
    best_bound: float
    mip_gap: float
    nodes: int
    wall_time: float
    node_log: list = field(default_factory=list)

    @property
    def has_solution(self) -> bool:
        return self.incumbent is not None


def mip_gap(incumbent: float, bound: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    return max(0.0, incumbent - bound) / max(1e-10, abs(incumbent))


# helpers -----------------------------------------------------------------------

_PRIORITY = (("y", 0), ("z", 1), ("xi", 2))


def label_priority(label: str) -> int:
    base = label.rsplit(".", 1)[-1]
    head = re.match(r"[A-Za-z_]+", base)
    name = head.group(0) if head else ""
    for key, prio in _PRIORITY:
        if name == key:
            return prio
    return len(_PRIORITY)


def branch_select(values, config: BnBConfig, labels=None, candidates=None) -> int:
    """Position (within ``values``) of the binary to branch on.

    ``values`` are the relaxation values of the binaries; ``candidates`` optionally
    masks out fixed ones.
    """
    v = np.asarray(values, dtype=float)
    frac = np.minimum(np.abs(v), np.abs(1.0 - v))
    mask = frac > config.int_tol
    if candidates is not None:
        mask &= np.asarray(candidates, dtype=bool)
    if not mask.any():
        raise ValueError("no fractional binary to branch on")
    if config.branching is Branching.LABEL_PRIORITY and labels is not None:
        prio = np.array([label_priority(lb) for lb in labels])
        top = prio[mask].min()
        mask &= prio == top
    score = np.where(mask, frac, -1.0)
    return int(np.argmax(score))


class _Propagator:
    """Bound propagation on rows that involve binaries only (one-hot rows, cuts)."""

    def __init__(self, std: StandardForm):
        ints = set(std.integer.tolist())
        bound_rows = set(std.lb_row.values()) | set(std.ub_row.values())
        A = std.A.tocsr()
        kinds = np.empty(std.num_rows, dtype=object)
        r = 0
        for cone in std.cones:
            kinds[r:r + cone.dim] = cone.kind
            r += cone.dim
        self.rows = []
        for i in range(std.num_rows):
            if i in bound_rows or kinds[i] is ConeKind.SOC:
                continue
            lo, hi = A.indptr[i], A.indptr[i + 1]
            cols = A.indices[lo:hi]
            if len(cols) == 0 or not all(c in ints for c in cols):
                continue
            coef = A.data[lo:hi]
            self.rows.append((cols, coef, std.b[i]))
            if kinds[i] is ConeKind.ZERO:
                self.rows.append((cols, -coef, -std.b[i]))

    def run(self, lb: np.ndarray, ub: np.ndarray) -> bool:
        """Tighten binary bounds in place; False when a row cannot be satisfied."""
        changed = True
        while changed:
            changed = False
            for cols, coef, rhs in self.rows:
                lo = np.where(coef > 0, coef * lb[cols], coef * ub[cols])
                minact = lo.sum()
                if minact > rhs + 1e-9:
                    return False
                for k, a, lk in zip(cols, coef, lo):
                    if lb[k] == ub[k]:
                        continue
                    rest = minact - lk
                    if rest + a * 1.0 > rhs + 1e-9:
                        ub[k] = 0.0
                        changed = True
                        if rest > rhs + 1e-9:
                            return False
                    elif rest > rhs + 1e-9:
                        lb[k] = 1.0
                        changed = True
                    if changed:
                        break
                if changed:
                    break
        return True


@dataclass(order=True)
class _Node:
    key: tuple
    id: int = field(compare=False)
    depth: int = field(compare=False)
    lb: np.ndarray = field(compare=False)
    ub: np.ndarray = field(compare=False)
    bound: float = field(compare=False)
    warm: ConicSolution | None = field(compare=False, default=None)
    parent: int = field(compare=False, default=-1)


class _Context:
    def __init__(self, std, engine, config):
        self.std = std
        self.engine = engine
        self.config = config
        self._local = threading.local()
        self.prepared = engine.prepare(std, config.solver)
        self.node_cfg = replace(config.solver, max_iter=min(config.solver.max_iter, config.node_max_iter))

    def solver(self):
        if self.config.threads <= 1:
            return self.prepared
        if not hasattr(self._local, "prepared"):
            self._local.prepared = self.engine.prepare(self.std, self.config.solver)
        return self._local.prepared

    def solve(self, lb, ub, warm=None, solver_config=None) -> ConicSolution:
        b = self.std.with_bounds(lb, ub)
        return self.solver().solve(b=b, warm=warm, config=solver_config)


def _as_standard(problem) -> StandardForm:
    return problem.to_standard() if isinstance(problem, ConicProblem) else problem


def _fixed_solve(ctx: _Context, lb, ub, values, warm=None, solver_config=None):
    ints = ctx.std.integer
    lb2, ub2 = lb.copy(), ub.copy()
    lb2[ints] = values
    ub2[ints] = values
    cfg = solver_config or ctx.node_cfg
    sol = ctx.solve(lb2, ub2, warm, cfg)
    if not sol.near_optimal(cfg.eps_primal, cfg.eps_dual):
        return None
    sol.u = sol.u.copy()
    sol.u[ints] = values
    return sol


def rounding_heuristic(relaxation: ConicSolution, problem, engine=None, lb=None, ub=None,
                       config: BnBConfig | None = None, _ctx=None) -> ConicSolution | None:
    """Round one-hot groups to their arg-max and other binaries to the nearest integer,
    then re-solve with binaries fixed.  ``None`` when the rounded point is infeasible."""
    config = config or BnBConfig()
    if engine is None or isinstance(engine, str):
        engine = get_engine(engine, default="ipm")
    ctx = _ctx or _Context(_as_standard(problem), engine, config)
    std = ctx.std
    lb = std.lb.copy() if lb is None else lb.copy()
    ub = std.ub.copy() if ub is None else ub.copy()
    u = relaxation.u
    vals = np.clip(np.round(u), lb, ub)
    for group in std.onehot:
        g = np.array(group)
        if not np.all(np.isin(g, std.integer)):
            continue
        forced = g[lb[g] >= 1.0]
        if len(forced):
            pick = forced[0]
        else:
            open_ = g[ub[g] > 0.0]
            if not len(open_):
                return None
            pick = open_[int(np.argmax(u[open_]))]
        vals[g] = 0.0
        vals[pick] = 1.0
    ints = std.integer
    rlb, rub = lb.copy(), ub.copy()
    rlb[ints] = vals[ints]
    rub[ints] = vals[ints]
    propagator = getattr(ctx, "propagator", None) or _Propagator(std)
    if not propagator.run(rlb, rub):
        return None
    return _fixed_solve(ctx, lb, ub, vals[ints], warm=relaxation)


def solve_mi(problem, config: BnBConfig | None = None, engine=None, progress=None) -> MISolution:
    """Branch-and-bound on the binaries of ``problem``.

    ``progress`` is an optional writable text stream receiving CSV lines
    ``node,bound,incumbent,gap,time``.
    """
    config = config or BnBConfig()
    engine = get_engine(engine, default="ipm") if engine is None or isinstance(engine, str) else engine
    std = _as_standard(problem)
    t0 = time.perf_counter()
    ctx = _Context(std, engine, config)
    ctx.propagator = _Propagator(std)
    ints = std.integer
    labels = [std.labels[k] for k in ints]
    if not len(ints):
        sol = ctx.prepared.solve()
        status = MIStatus.OPTIMAL if sol.ok else (
            MIStatus.INFEASIBLE if sol.status is Status.INFEASIBLE else MIStatus.NO_SOLUTION)
        obj = sol.objective if sol.ok else math.inf
        return MISolution(status, sol if sol.ok else None, obj, obj if sol.ok else -math.inf,
                          0.0 if sol.ok else math.inf, 1, time.perf_counter() - t0)

    if progress is not None:
        progress.write("node,bound,incumbent,gap,time\n")
    best_obj = math.inf
    incumbent: ConicSolution | None = None
    node_log = []
    counter = itertools.count()
    heap: list[_Node] = []
    stack: list[_Node] = []
    dfs = config.node_selection is NodeSelection.DEPTH_FIRST_PLUNGE
    # dive until the first incumbent, and again after each improvement
    plunging = True
    offset = std.offset

    def push(node: _Node):
        if dfs:
            stack.append(node)
        else:
            heapq.heappush(heap, node)

    def open_bound() -> float:
        bounds = [n.bound for n in heap] + [n.bound for n in stack]
        return min(bounds) if bounds else math.inf

    def prune_tol(obj):
        return max(config.abs_gap, config.rel_gap * abs(obj))

    def offer(sol: ConicSolution | None) -> bool:
        nonlocal best_obj, incumbent
        if sol is None or sol.objective >= best_obj - 1e-12:
            return False
        best_obj = sol.objective
        incumbent = sol
        return True

    root_lb, root_ub = std.lb.copy(), std.ub.copy()
    if not ctx.propagator.run(root_lb, root_ub):
        return MISolution(MIStatus.INFEASIBLE, None, math.inf, math.inf, math.inf, 0, time.perf_counter() - t0)
    push(_Node((-math.inf, 0, next(counter)), 0, 0, root_lb, root_ub, -math.inf))
    nodes = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    status = None

    node_cfg = ctx.node_cfg

    def evaluate(node: _Node):
        return ctx.solve(node.lb, node.ub, node.warm, node_cfg)

    fresh = False

    def end_plunge():
        nonlocal plunging, fresh
        plunging = incumbent is None or fresh
        fresh = False
        if not dfs:
            while stack:
                heapq.heappush(heap, stack.pop())

    try:
        while heap or stack:
            elapsed = time.perf_counter() - t0
            if elapsed > config.time_limit or nodes >= config.node_limit:
                status = "limit"
                break
            batch = []
            want = max(1, config.threads)
            while (heap or stack) and len(batch) < want:
                if stack and (dfs or plunging):
                    node = stack.pop()
                elif heap:
                    node = heapq.heappop(heap)
                else:
                    node = stack.pop()
                if node.bound >= best_obj - prune_tol(best_obj):
                    continue
                batch.append(node)
            if not batch:
                continue
            results = list(pool.map(evaluate, batch)) if pool else [evaluate(n) for n in batch]
            for node, sol in zip(batch, results):
                nodes += 1
                children = []
                raw = sol.objective
                node_log.append((node.id, node.parent, node.depth, raw, node.bound, sol.status.value))
                if sol.status is Status.INFEASIBLE:
                    end_plunge()
                    continue
                usable = sol.near_optimal(node_cfg.eps_primal, node_cfg.eps_dual)
                if sol.status is Status.OPTIMAL:
                    bound = max(raw, node.bound)
                elif usable:
                    bound = max(min(raw, sol.dual_objective), node.bound)
                else:
                    bound = node.bound
                if bound >= best_obj - prune_tol(best_obj):
                    end_plunge()
                    continue
                vals = sol.u[ints]
                free = node.lb[ints] < node.ub[ints]
                frac = np.minimum(np.abs(vals), np.abs(1.0 - vals))
                fractional = (frac > config.int_tol) & free
                if not fractional.any():
                    if usable and not free.any():
                        cand = sol
                        cand.u = cand.u.copy()
                        cand.u[ints] = np.round(vals)
                    else:
                        cand = _fixed_solve(ctx, node.lb, node.ub, np.round(vals), warm=sol)
                    if offer(cand):
                        fresh = True
                    elif not usable and free.any():
                        # unconverged relaxation that looks integral: keep splitting
                        k = int(np.argmax(np.where(free, 1.0, -1.0)))
                        children = _split(node, ints[k], vals[k], bound, sol, counter)
                    if not children:
                        end_plunge()
                        continue
                else:
                    if usable and (nodes == 1 or nodes % config.heuristic_every == 0):
                        if offer(rounding_heuristic(sol, std, lb=node.lb, ub=node.ub, config=config, _ctx=ctx)):
                            plunging = not dfs
                    if bound >= best_obj - prune_tol(best_obj):
                        end_plunge()
                        continue
                    pos = branch_select(vals, config, labels, free)
                    children = _split(node, ints[pos], vals[pos], bound, sol, counter)
                kept = []
                for child in children:
                    if ctx.propagator.run(child.lb, child.ub):
                        kept.append(child)
                if not kept:
                    end_plunge()
                elif plunging and not dfs:
                    # dive: preferred child goes on the plunge stack, the rest to the heap
                    stack.append(kept[0])
                    for child in kept[1:]:
                        heapq.heappush(heap, child)
                else:
                    if dfs:
                        for child in reversed(kept):
                            stack.append(child)
                    else:
                        for child in kept:
                            heapq.heappush(heap, child)
            bound_now = min(open_bound(), best_obj)
            if progress is not None:
                progress.write(f"{nodes},{bound_now:.10g},{best_obj:.10g},{mip_gap(best_obj, bound_now):.6g},"
                               f"{time.perf_counter() - t0:.3f}\n")
            if incumbent is not None and best_obj - bound_now <= prune_tol(best_obj):
                break
    finally:
        if pool:
            pool.shutdown()

    best_bound = min(open_bound(), best_obj)
    if status == "limit":
        best_bound = min(best_bound, best_obj)
    elif incumbent is not None:
        best_bound = max(best_bound, best_obj - prune_tol(best_obj)) if (heap or stack) else best_obj
    if incumbent is not None and config.polish:
        tight = SolverConfig(eps_primal=1e-9, eps_dual=1e-9, eps_gap=1e-9,
                             max_iter=config.solver.max_iter, rho=config.solver.rho)
        pol = _fixed_solve(ctx, std.lb, std.ub, incumbent.u[ints], warm=incumbent, solver_config=tight)
        if pol is not None and pol.objective <= incumbent.objective + 1e-6 * (1 + abs(incumbent.objective)):
            incumbent = pol
            best_obj = pol.objective
            best_bound = min(best_bound, best_obj)
    wall = time.perf_counter() - t0
    gap = mip_gap(best_obj, best_bound)
    if incumbent is None:
        st = MIStatus.NO_SOLUTION if status == "limit" else MIStatus.INFEASIBLE
        return MISolution(st, None, math.inf, best_bound, math.inf, nodes, wall, node_log)
    if status == "limit" and gap > config.rel_gap and best_obj - best_bound > config.abs_gap:
        st = MIStatus.FEASIBLE
    else:
        st = MIStatus.OPTIMAL
        gap = min(gap, config.rel_gap)
    return MISolution(st, incumbent, best_obj, best_bound, gap, nodes, wall, node_log)


def _split(node: _Node, var: int, value: float, bound: float, warm: ConicSolution, counter):
    down_lb, down_ub = node.lb.copy(), node.ub.copy()
    down_ub[var] = 0.0
    up_lb, up_ub = node.lb.copy(), node.ub.copy()
    up_lb[var] = 1.0
    down = _Node((bound, -(node.depth + 1), next(counter)), 0, node.depth + 1, down_lb, down_ub, bound, warm, node.id)
    up = _Node((bound, -(node.depth + 1), next(counter)), 0, node.depth + 1, up_lb, up_ub, bound, warm, node.id)
    down.id, up.id = down.key[2], up.key[2]
    return [up, down] if value >= 0.5 else [down, up]
