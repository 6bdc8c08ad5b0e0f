"""Random instance generation and instance persistence (JSON, plus a CSV importer)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import GeometryError, Region, SOCConstraint, check_nonempty, norm_label
from .model import Instance, ModelError
from .prefs import (Cell, DistancePreference, LinearPreference, PreferenceError, ProductionPreference,
                    Subdivision)

SCHEMA = "regioloc-instance"
SCHEMA_VERSION = 1
SCENARIOS = ("l1", "l2", "mixed")
FAMILIES = ("L", "D", "CES", "CD", "LF")


class InstanceFormatError(ValueError):
    pass


@dataclass
class GenConfig:
    n: int
    p: int = 1
    scenario: str = "l2"
    pref_family: str = "L"
    threshold: float = 0.0
    collocation: bool = False
    seed: int = 0
    blob_clusters: int = 3
    blob_std: float = 1.0
    box: float = 10.0

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ValueError("n and p must be at least 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        self.pref_family = self.pref_family.upper()
        if self.pref_family not in FAMILIES:
            raise ValueError(f"preference family must be one of {FAMILIES}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.blob_clusters < 1 or self.blob_std < 0:
            raise ValueError("need at least one cluster and a nonnegative spread")


class Stream:
    """PCG64 draws with explicit conversion recipes, so results do not depend on
    numpy's distribution code.

    uniform: top 53 bits of a 64-bit word times 2^-53; integers: floor of a uniform;
    normal: Box-Muller on two uniforms.
    """

    def __init__(self, seed_seq: np.random.SeedSequence):
        self._bits = np.random.PCG64(seed_seq)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        word = int(self._bits.random_raw())
        return lo + (hi - lo) * ((word >> 11) * 2.0**-53)

    def open_uniform(self, lo: float, hi: float) -> float:
        while True:
            v = self.uniform(lo, hi)
            if v > lo:
                return v

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list:
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i)
            out[i], out[j] = out[j], out[i]
        return out


def streams(seed: int) -> dict:
    # one stream per concern so the preference family never moves the geometry
    names = ("geometry", "norms", "weights", "prefs")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: Stream(child) for name, child in zip(names, children)}


def blob_centers(cfg: GenConfig, rng: Stream) -> list:
    k = cfg.blob_clusters
    hubs = [(rng.uniform(-cfg.box, cfg.box), rng.uniform(-cfg.box, cfg.box)) for _ in range(k)]
    counts = [cfg.n // k + (1 if c < cfg.n % k else 0) for c in range(k)]
    pts = []
    for hub, cnt in zip(hubs, counts):
        for _ in range(cnt):
            pts.append((hub[0] + cfg.blob_std * rng.normal(), hub[1] + cfg.blob_std * rng.normal()))
    order = rng.permutation(len(pts))
    return [pts[i] for i in order]


def _sector_subdivision(center, rng: Stream) -> Subdivision:
    c = np.array(center)
    normals = []
    for _ in range(2):
        theta = math.radians(rng.uniform(0.0, 360.0))
        normals.append(np.array([-math.sin(theta), math.cos(theta)]))
    cells = []
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            A = np.array([s1 * normals[0], s2 * normals[1]])
            cells.append(Cell.from_arrays(A, A @ c))
    while True:
        values = [float(rng.integer(1, 10)) for _ in cells]
        if len(set(values)) > 1:
            return Subdivision(cells, values)


def _preference(family: str, region: Region, rng: Stream):
    d = region.dim
    if family == "L":
        gamma = [(-1.0) ** rng.integer(0, 1) * rng.integer(1, 10) for _ in range(d)]
        return LinearPreference(gamma, float(rng.integer(1, 10)))
    if family == "D":
        k = rng.integer(1, 3)
        lo, hi = region.box()
        pts = []
        while len(pts) < k:
            cand = [rng.uniform(lo[q], hi[q]) for q in range(d)]
            if np.linalg.norm(np.array(cand) - region.c, ord=region.ball_norm) <= region.radius:
                pts.append(cand)
        return DistancePreference(pts, [1.0 / k] * k, region.transport_norm)
    factors = [_sector_subdivision(region.center, rng) for _ in range(2)]
    return ProductionPreference(family, factors, (0.5, 0.5), 0.5)


def generate(cfg: GenConfig) -> Instance:
    rs = streams(cfg.seed)
    geo = rs["geometry"]
    centers = blob_centers(cfg, geo)
    radii = [geo.open_uniform(0.05, 0.25) for _ in range(cfg.n)]
    weights = [rs["weights"].open_uniform(0.0, 1.0) for _ in range(cfg.n)]
    regions = []
    for c, r, w in zip(centers, radii, weights):
        if cfg.scenario == "l1":
            ball = trans = 1
        elif cfg.scenario == "l2":
            ball = trans = 2
        else:
            ball = rs["norms"].integer(1, 4)
            trans = rs["norms"].integer(1, 4)
        regions.append(Region(c, r, ball, trans, w))
    prefs = [_preference(cfg.pref_family, reg, rs["prefs"]) for reg in regions]
    return Instance(regions, prefs, cfg.p, cfg.threshold, cfg.collocation, cfg.scenario, cfg.seed,
                    cfg.pref_family, asdict(cfg))


# persistence -------------------------------------------------------------------

def _norm_out(tau):
    return norm_label(tau)


def region_to_dict(r: Region) -> dict:
    out = {"center": list(r.center), "radius": r.radius, "ball_norm": _norm_out(r.ball_norm),
           "transport_norm": _norm_out(r.transport_norm), "weight": r.weight}
    if r.extra_soc:
        out["extra_soc"] = [{"R": [list(row) for row in con.R], "T": list(con.T), "c": list(con.c), "f": con.f}
                            for con in r.extra_soc]
    return out


def region_from_dict(d: dict) -> Region:
    extra = tuple(SOCConstraint.from_arrays(c["R"], c["T"], c["c"], c["f"]) for c in d.get("extra_soc", []))
    return Region(tuple(d["center"]), float(d["radius"]), d.get("ball_norm", 2), d.get("transport_norm", 2),
                  float(d.get("weight", 1.0)), extra)


def pref_to_dict(p) -> dict | None:
    if p is None:
        return None
    if isinstance(p, LinearPreference):
        return {"family": "L", "gamma": list(p.gamma), "gamma0": p.gamma0}
    if isinstance(p, DistancePreference):
        return {"family": "D", "points": [list(b) for b in p.points], "lambdas": list(p.lambdas),
                "norm": _norm_out(p.norm)}
    return {
        "family": p.kind,
        "betas": list(p.betas),
        "tau_ces": p.tau_ces,
        "factors": [{"cells": [{"A": [list(row) for row in c.A], "b": list(c.b)} for c in f.cells],
                     "values": list(f.values)} for f in p.factors],
    }


def pref_from_dict(d: dict | None):
    if d is None:
        return None
    fam = d["family"].upper()
    if fam == "L":
        return LinearPreference(tuple(d["gamma"]), float(d.get("gamma0", 0.0)))
    if fam == "D":
        return DistancePreference(d["points"], d["lambdas"], d.get("norm", 2))
    if fam in ("CD", "CES", "LF"):
        factors = [Subdivision([Cell.from_arrays(c["A"], c["b"]) for c in f["cells"]], f["values"])
                   for f in d["factors"]]
        return ProductionPreference(fam, factors, tuple(d["betas"]), float(d.get("tau_ces", 0.5)))
    raise InstanceFormatError(f"unknown preference family {d['family']!r}")


def instance_to_dict(inst: Instance) -> dict:
    doc = {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "seed": inst.seed,
        "scenario": inst.scenario,
        "pref_family": inst.pref_family,
        "config": inst.config,
        "p": inst.p,
        "threshold": inst.threshold,
        "collocation": inst.collocation,
        "regions": [region_to_dict(r) for r in inst.regions],
        "prefs": [pref_to_dict(p) for p in inst.prefs],
    }
    if inst.bounds is not None:
        doc["bounds"] = [None if b is None else list(b) for b in inst.bounds]
    return doc


def instance_from_dict(doc: dict, check_regions: bool = True) -> Instance:
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise InstanceFormatError("not a regioloc instance document")
    if doc.get("version") != SCHEMA_VERSION:
        raise InstanceFormatError(f"unsupported instance schema version {doc.get('version')!r} "
                                  f"(this build reads version {SCHEMA_VERSION})")
    try:
        regions = [region_from_dict(r) for r in doc["regions"]]
        prefs = doc.get("prefs")
        if prefs is None:
            prefs = [None] * len(regions)
        if len(prefs) != len(regions):
            raise InstanceFormatError(f"{len(prefs)} preference entries for {len(regions)} regions")
        prefs = [pref_from_dict(p) for p in prefs]
        if check_regions:
            for r in regions:
                check_nonempty(r)
        return Instance(regions, prefs, int(doc.get("p", 1)), float(doc.get("threshold", 0.0)),
                        bool(doc.get("collocation", False)), doc.get("scenario", "custom"), doc.get("seed"),
                        doc.get("pref_family"), doc.get("config") or {}, doc.get("bounds"))
    except InstanceFormatError:
        raise
    except (KeyError, TypeError) as exc:
        raise InstanceFormatError(f"malformed instance document: missing or invalid {exc}") from exc
    except (GeometryError, PreferenceError, ModelError) as exc:
        raise InstanceFormatError(f"instance violates an invariant: {exc}") from exc


def dumps(inst: Instance) -> str:
    return json.dumps(instance_to_dict(inst), indent=1, sort_keys=True) + "\n"


def save(inst: Instance, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps(inst))


def load(path) -> Instance:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InstanceFormatError(f"{path}: not valid JSON ({exc})") from exc
    return instance_from_dict(doc)


def import_csv(path, p: int = 1, threshold: float = 0.0, collocation: bool = False) -> Instance:
    """Regions from a CSV with columns ``x,y,radius,weight[,ball_norm,transport_norm]``.

    No preferences are attached, so the threshold must stay at zero unless
    preferences are added afterwards.
    """
    regions = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                regions.append(Region((float(row["x"]), float(row["y"])), float(row["radius"]),
                                      row.get("ball_norm") or 2, row.get("transport_norm") or 2,
                                      float(row.get("weight") or 1.0)))
            except KeyError as exc:
                raise InstanceFormatError(f"{path}: missing column {exc}") from exc
    return Instance(regions, [None] * len(regions), p, threshold, collocation, "imported")
