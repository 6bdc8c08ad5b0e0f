"""Experiment runner, result analysis and SVG plots."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import statistics
import time
import traceback
import xml.etree.ElementTree as ET
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from . import gen, prefs
from .geometry import boundary_points, eval_norm
from .mibb import BnBConfig
from .model import Instance, Solution, normalize_instance, solve_instance, validate_solution

log = logging.getLogger(__name__)

KEY_FIELDS = ("n", "p", "scenario", "pref_family", "threshold", "collocation", "seed")
RESULT_FIELDS = KEY_FIELDS + ("status", "objective", "bound", "mip_gap", "nodes", "wall_time",
                              "max_violation", "error")


class HarnessError(RuntimeError):
    pass


@dataclass
class ExperimentMatrix:
    n: list
    p: list = field(default_factory=lambda: [1])
    scenario: list = field(default_factory=lambda: ["l2"])
    pref_family: list = field(default_factory=lambda: ["L"])
    threshold: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    collocation: list = field(default_factory=lambda: [False])
    time_limit: float = 3600.0
    gap: float = 1e-4
    engine: str | None = None
    out_dir: str = "results"
    blob_clusters: int = 3
    blob_std: float = 1.0

    def __post_init__(self):
        if not self.cells():
            raise HarnessError("the experiment matrix has an empty cross-product")

    def cells(self) -> list[dict]:
        axes = [self.n, self.p, self.scenario, self.pref_family, self.threshold, self.collocation, self.seeds]
        return [dict(zip(KEY_FIELDS, combo)) for combo in itertools.product(*axes)]


def _row_key(row: dict) -> tuple:
    return (int(row["n"]), int(row["p"]), str(row["scenario"]), str(row["pref_family"]).upper(),
            float(row["threshold"]), _as_bool(row["collocation"]), int(row["seed"]))


def _as_bool(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes")
    return bool(v)


def run_cell(cell: dict, time_limit: float, gap: float, engine: str | None,
             blob_clusters: int = 3, blob_std: float = 1.0) -> dict:
    """Generate, solve and validate one configuration; never raises."""
    row = dict(cell)
    row.update(status="", objective=math.nan, bound=math.nan, mip_gap=math.nan, nodes=0,
               wall_time=0.0, max_violation=math.nan, error="")
    t0 = time.perf_counter()
    try:
        inst = gen.generate(gen.GenConfig(cell["n"], cell["p"], cell["scenario"], cell["pref_family"],
                                          cell["threshold"], cell["collocation"], cell["seed"],
                                          blob_clusters, blob_std))
        cfg = BnBConfig(rel_gap=gap, time_limit=time_limit)
        norm = normalize_instance(inst)
        sol = solve_instance(inst, cfg, engine, norm_prefs=norm)
        row.update(status=sol.status, objective=sol.objective, bound=sol.best_bound, mip_gap=sol.mip_gap,
                   nodes=sol.nodes)
        if sol.has_point:
            row["max_violation"] = validate_solution(inst, sol, norm).max_violation()
    except prefs.InfeasibleThreshold as exc:
        row.update(status="infeasible", error=str(exc))
    except Exception as exc:  # crash isolation: record and move on
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
        log.debug("cell %s failed\n%s", cell, traceback.format_exc())
    row["wall_time"] = time.perf_counter() - t0
    return row


def read_results(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "n": int(row["n"]), "p": int(row["p"]), "scenario": row["scenario"],
                "pref_family": row["pref_family"], "threshold": float(row["threshold"]),
                "collocation": _as_bool(row["collocation"]), "seed": int(row["seed"]),
                "status": row["status"], "objective": float(row["objective"] or "nan"),
                "bound": float(row["bound"] or "nan"), "mip_gap": float(row["mip_gap"] or "nan"),
                "nodes": int(row["nodes"] or 0), "wall_time": float(row["wall_time"] or 0.0),
                "max_violation": float(row["max_violation"] or "nan"), "error": row.get("error", ""),
            })
    return out


def run_experiment(matrix: ExperimentMatrix, jobs: int = 1, progress=None) -> Path:
    """Run every cell not already present in ``results.csv``; returns the CSV path."""
    out_dir = Path(matrix.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "results.csv"
        fresh = not path.exists() or path.stat().st_size == 0
        fh = open(path, "a", newline="")
    except OSError as exc:
        raise HarnessError(f"cannot write results to {out_dir}: {exc}") from exc
    done = set() if fresh else {_row_key(r) for r in read_results(path)}
    todo = [c for c in matrix.cells() if _row_key(c) not in done]
    args = (matrix.time_limit, matrix.gap, matrix.engine, matrix.blob_clusters, matrix.blob_std)
    with fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        if fresh:
            writer.writeheader()

        def emit(row):
            writer.writerow({k: row.get(k, "") for k in RESULT_FIELDS})
            fh.flush()
            if progress:
                progress(row)

        if jobs <= 1:
            for cell in todo:
                emit(run_cell(cell, *args))
        else:
            # results are written by this process only, so appends never interleave
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(run_cell, cell, *args): cell for cell in todo}
                for fut in as_completed(futures):
                    try:
                        emit(fut.result())
                    except Exception as exc:  # worker died
                        row = dict(futures[fut], status="error", error=f"worker failure: {exc}")
                        emit(row)
    return path


# analysis ------------------------------------------------------------------------

@dataclass
class PEPair:
    n: int
    p: int
    scenario: str
    pref_family: str
    seed: int
    threshold: float
    tc0: float
    tc: float
    pe: float


def _solved(row) -> bool:
    return row["status"] in ("optimal", "feasible") and math.isfinite(row["objective"])


def price_of_efficiency(rows: list[dict]) -> tuple[list[PEPair], list[dict]]:
    """Matched ``(TC(t) - TC(0)) / TC(0)`` values and their min/median/max per ``(n, threshold)``."""
    base = {}
    for r in rows:
        if r["threshold"] == 0.0 and _solved(r):
            base[(r["n"], r["p"], r["scenario"], r["pref_family"], r["collocation"], r["seed"])] = r["objective"]
    pairs = []
    skipped = 0
    for r in rows:
        if r["threshold"] == 0.0 or not _solved(r):
            continue
        k = (r["n"], r["p"], r["scenario"], r["pref_family"], r["collocation"], r["seed"])
        if k not in base:
            continue
        tc0 = base[k]
        if tc0 == 0.0:
            skipped += 1
            continue
        pairs.append(PEPair(r["n"], r["p"], r["scenario"], r["pref_family"], r["seed"], r["threshold"], tc0,
                            r["objective"], (r["objective"] - tc0) / tc0))
    if skipped:
        log.warning("%d pair(s) with zero baseline cost skipped: PE is undefined there", skipped)
    groups = {}
    for pr in pairs:
        groups.setdefault((pr.n, pr.threshold), []).append(pr.pe)
    summary = [{"n": n, "threshold": t, "count": len(v), "min": min(v), "median": statistics.median(v),
                "max": max(v)} for (n, t), v in sorted(groups.items())]
    return pairs, summary


def write_pe(pairs: list[PEPair], summary: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "threshold", "count", "min", "median", "max"])
        for s in summary:
            w.writerow([s["n"], s["threshold"], s["count"], s["min"], s["median"], s["max"]])


def kruskal_wallis(groups) -> tuple[float, float]:
    """Kruskal-Wallis H with tie correction and its chi-square p-value.

    Ranks are half-integers, so the statistic is accumulated in exact rationals.
    """
    groups = [list(map(float, g)) for g in groups]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("need at least two nonempty groups")
    pooled = np.concatenate(groups)
    N = len(pooled)
    ranks = stats.rankdata(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    ties = sum(Fraction(int(t) ** 3 - int(t)) for t in counts)
    correction = 1 - ties / Fraction(N**3 - N) if N > 1 else Fraction(0)
    if correction == 0:
        return 0.0, 1.0
    total = Fraction(0)
    start = 0
    for g in groups:
        rsum = sum(Fraction(int(round(2 * r)), 2) for r in ranks[start:start + len(g)])
        total += rsum * rsum / len(g)
        start += len(g)
    H = (Fraction(12, N * (N + 1)) * total - 3 * (N + 1)) / correction
    H = float(H)
    return H, float(stats.chi2.sf(H, len(groups) - 1))


def threshold_test(rows: list[dict], n: int | None = None) -> tuple[float, float, dict]:
    """Kruskal-Wallis across thresholds on solved objectives."""
    groups = {}
    for r in rows:
        if _solved(r) and (n is None or r["n"] == n):
            groups.setdefault(r["threshold"], []).append(r["objective"])
    if len(groups) < 2:
        raise ValueError("need solved rows for at least two thresholds")
    keys = sorted(groups)
    H, pv = kruskal_wallis([groups[k] for k in keys])
    return H, pv, groups


# plotting --------------------------------------------------------------------------

SVG_NS = "http://www.w3.org/2000/svg"


def _clip(poly: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon to ``a.x <= b``."""
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp, fq = a @ p - b, a @ q - b
        if fp <= 0:
            out.append(p)
        if fp * fq < 0:
            out.append(p + (q - p) * (fp / (fp - fq)))
    return np.array(out) if out else np.zeros((0, 2))


def _heat(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    # pale yellow to dark green
    r = int(255 - 200 * v)
    g = int(245 - 90 * v)
    b = int(180 - 150 * v)
    return f"#{r:02x}{g:02x}{b:02x}"


def _star(x, y, r) -> str:
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else 0.45 * r
        ang = math.pi / 2 + k * math.pi / 5
        pts.append(f"{x + rad * math.cos(ang):.4f},{y - rad * math.sin(ang):.4f}")
    return " ".join(pts)


def plot_solution(instance: Instance, solution: Solution | None, path, size: int = 640) -> Path:
    """Draw regions, preference shading, entry points, facilities and assignments as SVG."""
    if instance.dim != 2:
        raise ValueError("plots need planar instances")
    theta = np.linspace(0.0, 2 * math.pi, 128, endpoint=False)
    outlines = [boundary_points(r, theta) for r in instance.regions]
    pts = np.vstack(outlines)
    has_sol = solution is not None and solution.has_point
    if has_sol:
        pts = np.vstack([pts, np.asarray(solution.facilities), np.asarray(solution.entries)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    lo = lo - 0.08 * span
    scale = size / (1.16 * span)

    def tx(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    def path_d(poly):
        xy = [tx(p) for p in poly]
        return "M " + " L ".join(f"{x:.3f} {y:.3f}" for x, y in xy) + " Z"

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(f"{{{SVG_NS}}}svg", width=str(size), height=str(size), viewBox=f"0 0 {size} {size}")
    ET.SubElement(svg, f"{{{SVG_NS}}}rect", width="100%", height="100%", fill="white")
    shade = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"class": "heat"})
    norm = normalize_instance(instance) if instance.threshold > 0 else []
    for i, npref in enumerate(norm):
        if npref is None:
            continue
        spec = npref.spec
        if isinstance(spec, prefs.ProductionPreference):
            for combo in npref.nonempty:
                poly = outlines[i]
                for f, l in enumerate(combo):
                    A, b = spec.factors[f].cells[l].arrays()
                    for row, bk in zip(A, b):
                        poly = _clip(poly, row, bk)
                        if len(poly) < 3:
                            break
                if len(poly) >= 3:
                    ET.SubElement(shade, f"{{{SVG_NS}}}path", d=path_d(poly),
                                  fill=_heat(npref.rescale(spec.combo_value(combo))), stroke="none")
        else:
            region = instance.regions[i]
            g = np.linspace(-1.0, 1.0, 15) * region.radius
            cell = 2 * region.radius / 14 * scale
            for gx in g:
                for gy in g:
                    q = region.c + np.array([gx, gy])
                    if not eval_norm(q - region.c, region.ball_norm) <= region.radius:
                        continue
                    x, y = tx(q)
                    ET.SubElement(shade, f"{{{SVG_NS}}}rect", x=f"{x - cell / 2:.3f}", y=f"{y - cell / 2:.3f}",
                                  width=f"{cell:.3f}", height=f"{cell:.3f}", stroke="none",
                                  fill=_heat(float(npref.normalized(q))))
    for i, poly in enumerate(outlines):
        ET.SubElement(svg, f"{{{SVG_NS}}}path", {"class": "region", "d": path_d(poly), "fill": "none",
                                                 "stroke": "#1f4e79", "stroke-width": "1.2",
                                                 "data-region": str(i)})
    if has_sol:
        X = np.asarray(solution.facilities)
        A = np.asarray(solution.entries)
        tri = max(4.0, size / 120)
        for i, j in enumerate(solution.assignment):
            (x1, y1), (x2, y2) = tx(A[i]), tx(X[j])
            ET.SubElement(svg, f"{{{SVG_NS}}}line", {"class": "assign", "x1": f"{x1:.3f}", "y1": f"{y1:.3f}",
                                                     "x2": f"{x2:.3f}", "y2": f"{y2:.3f}", "stroke": "#888888",
                                                     "stroke-dasharray": "4 3"})
        group_of = {}
        for gid, (i, k) in enumerate(solution.collocated):
            gid = group_of.get(k, group_of.get(i, gid))
            group_of[i] = group_of[k] = gid
        for i, a in enumerate(A):
            x, y = tx(a)
            attrs = {"class": "entry", "fill": "#8b0000",
                     "points": f"{x:.3f},{y - tri:.3f} {x - tri:.3f},{y + tri:.3f} {x + tri:.3f},{y + tri:.3f}",
                     "data-region": str(i)}
            if i in group_of:
                attrs["data-collocated"] = str(group_of[i])
            ET.SubElement(svg, f"{{{SVG_NS}}}polygon", attrs)
        for gid in sorted(set(group_of.values())):
            members = [i for i, g in group_of.items() if g == gid]
            x, y = tx(A[members[0]])
            ET.SubElement(svg, f"{{{SVG_NS}}}circle", {"class": "collocated", "cx": f"{x:.3f}", "cy": f"{y:.3f}",
                                                       "r": f"{1.8 * tri:.3f}", "fill": "none",
                                                       "stroke": "#d2691e", "data-collocated": str(gid)})
        for j, xf in enumerate(X):
            x, y = tx(xf)
            ET.SubElement(svg, f"{{{SVG_NS}}}polygon", {"class": "facility", "points": _star(x, y, 2 * tri),
                                                        "fill": "#1a1a1a", "data-facility": str(j)})
    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path
