"""Conic intermediate representation and SOC reformulation helpers.

Every model compiles to ``min c^T u  s.t.  A u + s = b,  s in K`` where K is a
product of zero, nonnegative and second-order cones.  Builders work with
``LinExpr`` objects; ``ConicProblem.to_standard`` produces the sparse arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .geometry import Region, parse_norm


class ConicError(ValueError):
    pass


class ConeKind(enum.Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"


@dataclass(frozen=True)
class Cone:
    kind: ConeKind
    dim: int

    def __post_init__(self):
        if self.dim < 1 or (self.kind is ConeKind.SOC and self.dim < 2):
            raise ConicError(f"invalid cone dimension {self.dim} for {self.kind.value}")


@dataclass(frozen=True)
class VarHandle:
    index: int
    label: str

    def expr(self) -> "LinExpr":
        return LinExpr({self.index: 1.0})

    def __add__(self, other):
        return self.expr() + other

    __radd__ = __add__

    def __sub__(self, other):
        return self.expr() - other

    def __rsub__(self, other):
        return as_expr(other) - self.expr()

    def __mul__(self, k):
        return self.expr() * k

    __rmul__ = __mul__

    def __neg__(self):
        return -self.expr()


class LinExpr:
    """Sparse affine expression ``sum_k coef_k u_k + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const: float = 0.0):
        self.terms = dict(terms or {})
        self.const = float(const)

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def __add__(self, other):
        other = as_expr(other)
        out = self.copy()
        for k, v in other.terms.items():
            out.terms[k] = out.terms.get(k, 0.0) + v
        out.const += other.const
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-as_expr(other))

    def __rsub__(self, other):
        return as_expr(other) - self

    def __neg__(self):
        return LinExpr({k: -v for k, v in self.terms.items()}, -self.const)

    def __mul__(self, k):
        k = float(k)
        return LinExpr({i: k * v for i, v in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def value(self, u: np.ndarray) -> float:
        return self.const + sum(v * u[k] for k, v in self.terms.items())

    def __repr__(self):
        body = " + ".join(f"{v:g}*u{k}" for k, v in self.terms.items())
        return f"LinExpr({body or '0'} + {self.const:g})"


def as_expr(obj) -> LinExpr:
    if isinstance(obj, LinExpr):
        return obj
    if isinstance(obj, VarHandle):
        return obj.expr()
    if isinstance(obj, (int, float, np.floating, np.integer)):
        return LinExpr(const=float(obj))
    raise TypeError(f"cannot use {type(obj).__name__} in a linear expression")


def lin_sum(items: Iterable) -> LinExpr:
    out = LinExpr()
    for it in items:
        out = out + it
    return out


@dataclass
class StandardForm:
    """Compiled problem data; bound rows make variable fixings pure ``b`` edits."""

    A: sp.csc_matrix
    b: np.ndarray
    c: np.ndarray
    cones: list
    labels: list
    integer: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    lb_row: dict = field(default_factory=dict)
    ub_row: dict = field(default_factory=dict)
    onehot: list = field(default_factory=list)
    offset: float = 0.0

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
        """Right-hand side for modified variable bounds (rows must already exist)."""
        b = self.b.copy()
        for k, r in self.lb_row.items():
            b[r] = -lb[k]
        for k, r in self.ub_row.items():
            b[r] = ub[k]
        return b


class ConicProblem:
    """Incrementally built conic problem.

    Constraint blocks are stored as ``(kind, [expr, ...])`` meaning the slack vector
    ``(expr_1, ..., expr_k)`` must lie in the cone.
    """

    def __init__(self):
        self.labels: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: set[int] = set()
        self.objective = LinExpr()
        self.blocks: list[tuple[ConeKind, list[LinExpr]]] = []
        self.onehot: list[list[int]] = []
        self.meta: dict = {}

    # variables -----------------------------------------------------------
    @property
    def num_vars(self) -> int:
        return len(self.labels)

    @property
    def num_rows(self) -> int:
        return sum(len(exprs) for _, exprs in self.blocks)

    @property
    def cones(self) -> list[Cone]:
        return [Cone(kind, len(exprs)) for kind, exprs in self.blocks]

    def add_var(self, label: str, lb: float = -math.inf, ub: float = math.inf, binary: bool = False) -> VarHandle:
        idx = len(self.labels)
        self.labels.append(label)
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
            self.integer.add(idx)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        return VarHandle(idx, label)

    def add_vars(self, prefix: str, n: int, **kw) -> list[VarHandle]:
        return [self.add_var(f"{prefix}[{k}]", **kw) for k in range(n)]

    def var(self, label: str) -> VarHandle:
        return VarHandle(self.labels.index(label), label)

    # constraints ---------------------------------------------------------
    def add_block(self, kind: ConeKind, exprs: Sequence) -> None:
        exprs = [as_expr(e) for e in exprs]
        Cone(kind, len(exprs))
        for e in exprs:
            for k in e.terms:
                if not 0 <= k < self.num_vars:
                    raise ConicError(f"expression references unknown variable {k}")
        self.blocks.append((kind, exprs))

    def add_eq(self, expr) -> None:
        """``expr == 0``"""
        self.add_block(ConeKind.ZERO, [expr])

    def add_ge(self, expr) -> None:
        """``expr >= 0``"""
        self.add_block(ConeKind.NONNEG, [expr])

    def add_le(self, lhs, rhs) -> None:
        self.add_ge(as_expr(rhs) - lhs)

    def add_soc(self, exprs: Sequence) -> None:
        """``||exprs[1:]||_2 <= exprs[0]``"""
        self.add_block(ConeKind.SOC, exprs)

    def add_rotated(self, u, v, w) -> None:
        """``u^2 <= v w`` with ``v, w >= 0``, written as ``||(2u, v - w)|| <= v + w``."""
        u, v, w = as_expr(u), as_expr(v), as_expr(w)
        self.add_soc([v + w, 2.0 * u, v - w])

    def add_onehot(self, handles: Sequence[VarHandle]) -> None:
        self.add_eq(lin_sum(handles) - 1.0)
        self.onehot.append([h.index for h in handles])

    def set_objective(self, expr) -> None:
        if isinstance(expr, dict):
            expr = lin_sum(float(v) * h for h, v in expr.items())
        self.objective = as_expr(expr)

    # compilation ---------------------------------------------------------
    def to_standard(self) -> StandardForm:
        n = self.num_vars
        zero_rows, nonneg_rows, soc_blocks = [], [], []
        for kind, exprs in self.blocks:
            if kind is ConeKind.ZERO:
                zero_rows.extend(exprs)
            elif kind is ConeKind.NONNEG:
                nonneg_rows.extend(exprs)
            else:
                soc_blocks.append(exprs)
        lb = np.array(self.lb, dtype=float)
        ub = np.array(self.ub, dtype=float)
        rows, cols, vals, b = [], [], [], []

        def emit(e: LinExpr):
            r = len(b)
            for k, v in e.terms.items():
                if v != 0.0:
                    rows.append(r)
                    cols.append(k)
                    vals.append(-v)
            b.append(e.const)
            return r

        for e in zero_rows:
            emit(e)
        for e in nonneg_rows:
            emit(e)
        lb_row, ub_row = {}, {}
        for k in range(n):
            if math.isfinite(lb[k]):
                lb_row[k] = emit(LinExpr({k: 1.0}, -lb[k]))
            if math.isfinite(ub[k]):
                ub_row[k] = emit(LinExpr({k: -1.0}, ub[k]))
        cones = []
        if zero_rows:
            cones.append(Cone(ConeKind.ZERO, len(zero_rows)))
        n_lin = len(b) - len(zero_rows)
        if n_lin:
            cones.append(Cone(ConeKind.NONNEG, n_lin))
        for exprs in soc_blocks:
            for e in exprs:
                emit(e)
            cones.append(Cone(ConeKind.SOC, len(exprs)))
        m = len(b)
        A = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
        A.sum_duplicates()
        c = np.zeros(n)
        for k, v in self.objective.terms.items():
            c[k] += v
        return StandardForm(
            A=A, b=np.array(b, dtype=float), c=c, cones=cones, labels=list(self.labels),
            integer=np.array(sorted(self.integer), dtype=int), lb=lb, ub=ub,
            lb_row=lb_row, ub_row=ub_row, onehot=[list(g) for g in self.onehot],
            offset=self.objective.const,
        )

    def objective_constant(self) -> float:
        return self.objective.const


# SOC reformulation toolbox -------------------------------------------------

def epigraph_norm(problem: ConicProblem, z: Sequence, t, tau) -> None:
    """Add constraints whose projection on ``(z, t)`` is ``||z||_tau <= t``."""
    tau = parse_norm(tau)
    z = [as_expr(e) for e in z]
    t = as_expr(t)
    problem.add_ge(t)
    d = len(z)
    if tau == 2:
        problem.add_soc([t] + z)
        return
    if math.isinf(tau):
        for e in z:
            problem.add_ge(t - e)
            problem.add_ge(t + e)
        return
    tag = len(problem.labels)
    if tau == 4:
        # z^2 <= s t and s^2 <= r t  give  r >= z^4 / t^3
        s = [problem.add_var(f"_s{tag}[{k}]") for k in range(d)]
        r = [problem.add_var(f"_r{tag}[{k}]") for k in range(d)]
        for e, sk, rk in zip(z, s, r):
            problem.add_rotated(e, sk, t)
            problem.add_rotated(sk, rk, t)
        problem.add_ge(t - lin_sum(r))
        return
    v = [problem.add_var(f"_v{tag}[{k}]") for k in range(d)]
    for e, vk in zip(z, v):
        problem.add_ge(vk - e)
        problem.add_ge(vk + e)
    if tau == 1:
        problem.add_ge(t - lin_sum(v))
        return
    if tau == 3:
        # v^2 <= w t and w^2 <= s v  give  s >= v^3 / t^2
        w = [problem.add_var(f"_w{tag}[{k}]") for k in range(d)]
        s = [problem.add_var(f"_s{tag}[{k}]") for k in range(d)]
        for vk, wk, sk in zip(v, w, s):
            problem.add_rotated(vk, wk, t)
            problem.add_rotated(wk, sk, vk)
        problem.add_ge(t - lin_sum(s))
        return
    raise ConicError(f"unsupported norm {tau}")


def tower_values(z, t: float, tau) -> dict:
    """Auxiliary values that extend a point with ``||z||_tau <= t`` to a feasible tower."""
    tau = parse_norm(tau)
    v = np.abs(np.asarray(z, dtype=float))
    if tau in (1, 2) or math.isinf(tau):
        return {"v": v}
    if t <= 0:
        zeros = np.zeros_like(v)
        return {"v": v, "w": zeros, "s": zeros, "r": zeros}
    if tau == 3:
        w = v**2 / t
        s = np.divide(w**2, v, out=np.zeros_like(v), where=v > 0)
        return {"v": v, "w": w, "s": s}
    s = v**2 / t
    return {"s": s, "r": s**2 / t}


def region_membership(problem: ConicProblem, a: Sequence, region: Region) -> None:
    """Constrain point ``a`` to the region (ball plus extra SOC cuts)."""
    if len(a) != region.dim:
        raise ConicError("point dimension does not match the region")
    tag = len(problem.labels)
    t = problem.add_var(f"_rad{tag}")
    problem.add_eq(t - region.radius)
    epigraph_norm(problem, [as_expr(ak) - ck for ak, ck in zip(a, region.center)], t, region.ball_norm)
    for con in region.extra_soc:
        R, T, c, f = con.arrays()
        head = lin_sum(float(ck) * ak for ck, ak in zip(c, a)) + f
        body = [lin_sum(float(rk) * ak for rk, ak in zip(row, a)) + Tk for row, Tk in zip(R, T)]
        problem.add_soc([head] + body)


def epigraph_distance(problem: ConicProblem, u: Sequence, v: Sequence, t, tau) -> None:
    """``||u - v||_tau <= t`` through explicit difference variables.

    ``u`` and ``v`` may mix variables and constants.
    """
    u = list(u)
    v = list(v)
    if len(u) != len(v):
        raise ConicError("distance operands differ in dimension")
    tag = len(problem.labels)
    w = [problem.add_var(f"_dw{tag}[{k}]") for k in range(len(u))]
    for wk, uk, vk in zip(w, u, v):
        problem.add_eq(wk - (as_expr(uk) - as_expr(vk)))
    epigraph_norm(problem, w, t, tau)


# text dump ------------------------------------------------------------------

IR_HEADER = "regioloc-ir 1"
RESULT_HEADER = "regioloc-result 1"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ir(std: StandardForm, path) -> None:
    """Write the compiled problem: one ``row`` line per constraint, cones annotated."""
    A = std.A.tocsr()
    lines = [IR_HEADER, f"vars {std.num_vars}", f"offset {_fmt(std.offset)}"]
    ints = set(std.integer.tolist())
    for k, label in enumerate(std.labels):
        lines.append(f"v {k} {_fmt(std.lb[k])} {_fmt(std.ub[k])} {int(k in ints)} {label}")
    for k in np.flatnonzero(std.c):
        lines.append(f"obj {k} {_fmt(std.c[k])}")
    r = 0
    for cone in std.cones:
        lines.append(f"cone {cone.kind.value} {cone.dim}")
        for _ in range(cone.dim):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            terms = " ".join(f"{j}:{_fmt(x)}" for j, x in zip(A.indices[lo:hi], A.data[lo:hi]))
            lines.append(f"row {r} {_fmt(std.b[r])} {terms}".rstrip())
            r += 1
    for k, row in std.lb_row.items():
        lines.append(f"lbrow {k} {row}")
    for k, row in std.ub_row.items():
        lines.append(f"ubrow {k} {row}")
    for g in std.onehot:
        lines.append("onehot " + " ".join(map(str, g)))
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ir(path) -> StandardForm:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != IR_HEADER:
        raise ConicError(f"{path}: not a regioloc IR file")
    n = int(lines[1].split()[1])
    labels, lb, ub, ints = [""] * n, np.zeros(n), np.zeros(n), []
    c = np.zeros(n)
    rows, cols, vals, b, cones = [], [], [], [], []
    lb_row, ub_row, onehot = {}, {}, []
    offset = 0.0
    for ln in lines[2:]:
        parts = ln.split(" ")
        tag = parts[0]
        if tag == "v":
            k = int(parts[1])
            lb[k], ub[k] = float(parts[2]), float(parts[3])
            if parts[4] == "1":
                ints.append(k)
            labels[k] = " ".join(parts[5:])
        elif tag == "offset":
            offset = float(parts[1])
        elif tag == "obj":
            c[int(parts[1])] = float(parts[2])
        elif tag == "cone":
            cones.append(Cone(ConeKind(parts[1]), int(parts[2])))
        elif tag == "row":
            r = int(parts[1])
            b.append(float(parts[2]))
            for term in parts[3:]:
                j, x = term.split(":")
                rows.append(r)
                cols.append(int(j))
                vals.append(float(x))
        elif tag == "lbrow":
            lb_row[int(parts[1])] = int(parts[2])
        elif tag == "ubrow":
            ub_row[int(parts[1])] = int(parts[2])
        elif tag == "onehot":
            onehot.append([int(x) for x in parts[1:]])
        elif tag == "end":
            break
    A = sp.csc_matrix((vals, (rows, cols)), shape=(len(b), n))
    if sum(k.dim for k in cones) != len(b):
        raise ConicError(f"{path}: cone dimensions do not partition the rows")
    return StandardForm(A, np.array(b), c, cones, labels, np.array(ints, dtype=int), lb, ub,
                        lb_row, ub_row, onehot, offset)
