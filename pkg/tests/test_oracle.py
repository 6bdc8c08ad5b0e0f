import math

import numpy as np
import pytest

from regioloc.gen import GenConfig, generate
from regioloc.geometry import Region
from regioloc.model import Instance
from regioloc.oracle import (GridSpec, OracleError, enumerate_assignments, enumerate_best, grid_weber,
                             region_distance, restricted_growth, sample_normalize)
from regioloc.prefs import Cell, LinearPreference, ProductionPreference, Subdivision, normalize

TRIANGLE = [(0, 0), (1, 0), (0.5, math.sqrt(3) / 2)]


def test_grid_weber_single_region():
    x, val = grid_weber(Instance([Region((2, -3), 0.4, ball_norm=3)], None))
    assert val == pytest.approx(0.0, abs=1e-9)
    assert np.linalg.norm(x - (2, -3), ord=3) <= 0.4 + 1e-9


def test_grid_weber_triangle():
    _, val = grid_weber(Instance([Region(c, 0.1) for c in TRIANGLE], None))
    assert val == pytest.approx(math.sqrt(3) - 0.3, rel=1e-4)


def test_grid_weber_segment_median():
    x, val = grid_weber(Instance([Region((0, 0), 1e-9), Region((2, 0), 1e-9)], None))
    assert val == pytest.approx(2.0, rel=1e-6)
    assert abs(x[1]) < 1e-3 and -1e-6 <= x[0] <= 2 + 1e-6


def test_grid_weber_guards():
    with pytest.raises(OracleError):
        grid_weber(Instance([Region((0, 0), 1.0)] * 2, None, p=2))
    with pytest.raises(OracleError):
        grid_weber(Instance([Region((0, 0), 1.0)], [LinearPreference((1, 0))], threshold=0.2))


@pytest.mark.parametrize("tau", [1, 3, 4, math.inf])
def test_region_distance_matches_boundary_scan(tau):
    region = Region((0, 0), 1.0, ball_norm=tau, transport_norm={1: 2, 3: 1, 4: math.inf, math.inf: 3}[tau])
    X = np.array([[3.0, 1.0], [-2.0, -2.5], [0.1, 0.2]])
    got = region_distance(region, X)
    th = np.linspace(0, 2 * np.pi, 200_000)
    U = np.c_[np.cos(th), np.sin(th)]
    B = U / np.linalg.norm(U, ord=tau, axis=1)[:, None]
    for x, g in zip(X, got):
        brute = np.linalg.norm(B - x, ord=region.transport_norm, axis=1).min()
        if np.linalg.norm(x, ord=tau) <= 1:
            assert g == pytest.approx(0.0, abs=1e-9)
        else:
            # the scan is a discretized upper bound
            assert brute - 1e-4 <= g <= brute + 1e-9


def test_grid_spec_validation():
    with pytest.raises(OracleError):
        GridSpec((0, 0), (1, 1), resolution=1)


@pytest.mark.parametrize("n,p,count", [(4, 2, 8), (4, 3, 14), (3, 1, 1), (5, 2, 16)])
def test_restricted_growth_counts(n, p, count):
    seqs = list(restricted_growth(n, p))
    assert len(seqs) == count == len(set(map(tuple, seqs)))
    assert all(s[0] == 0 for s in seqs)


def test_enumeration_examples():
    assert enumerate_assignments(Instance([Region((0, 0), 0.1), Region((4, 1), 0.2)], None, p=2)) == \
        pytest.approx(0.0, abs=1e-7)
    inst = generate(GenConfig(n=3, p=1, scenario="l2", seed=2, blob_std=2.0))
    _, grid = grid_weber(inst)
    assert enumerate_assignments(inst) == pytest.approx(grid, rel=1e-4)


def test_enumeration_reports_structure():
    regions = [Region((0, 0), 0.1), Region((0, 0), 0.1), Region((10, 0), 0.1), Region((10, 0), 0.1)]
    res = enumerate_best(Instance(regions, None, collocation=True))
    assert res.objective == pytest.approx(9.8, rel=1e-6)
    assert sorted(res.collocated) == [(1, 0), (3, 2)]
    assert res.subproblems > 0


def test_enumeration_size_guard():
    with pytest.raises(OracleError):
        enumerate_assignments(Instance([Region((k, 0), 0.1) for k in range(7)], None))
    with pytest.raises(OracleError):
        enumerate_assignments(Instance([Region((k, 0), 0.1) for k in range(4)], None, p=4))


def test_sample_normalize_linear():
    lo, hi = sample_normalize(LinearPreference((1, 0)), Region((0, 0), 1.0), 100_000)
    assert -1 <= lo < -0.99 and 0.99 < hi <= 1


def test_sample_normalize_constant():
    spec = LinearPreference((0, 0), 3.0)
    assert sample_normalize(spec, Region((0, 0), 1.0), 10_000) == (3.0, 3.0)


def test_sample_normalize_production_exact():
    e0, e1 = np.eye(2)
    f0 = Subdivision([Cell.from_arrays([e0], [0]), Cell.from_arrays([-e0], [0])], [2, 5])
    f1 = Subdivision([Cell.from_arrays([e1], [0]), Cell.from_arrays([-e1], [0])], [3, 7])
    spec = ProductionPreference("CES", (f0, f1), (0.5, 0.5), 0.5)
    region = Region((0.3, -0.2), 1.0)
    exact = normalize(spec, region)
    assert sample_normalize(spec, region, 20_000) == (exact.lb, exact.ub)


def test_sample_normalize_needs_enough_samples():
    with pytest.raises(OracleError):
        sample_normalize(LinearPreference((1, 0)), Region((0, 0), 1.0), 100)


@pytest.mark.parametrize("fam", ["L", "D"])
def test_sampled_bounds_inside_exact(fam):
    inst = generate(GenConfig(n=10, scenario="mixed", pref_family=fam, seed=12))
    for spec, region in zip(inst.prefs, inst.regions):
        exact = normalize(spec, region)
        lo, hi = sample_normalize(spec, region, 10_000)
        slack = 1e-9 * (1 + abs(exact.ub) + abs(exact.lb))
        assert exact.lb - slack <= lo <= hi <= exact.ub + slack
        assert hi - lo >= 0.9 * (exact.ub - exact.lb) - 1e-3
