import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from regioloc.gen import GenConfig, generate
from regioloc.geometry import Region
from regioloc.harness import (HarnessError, ExperimentMatrix, kruskal_wallis, plot_solution, price_of_efficiency,
                              read_results, run_cell, run_experiment, threshold_test, write_pe)
from regioloc.model import Instance, Solution, solve_instance

NS = {"s": "http://www.w3.org/2000/svg"}


def row(threshold, objective, seed=0, status="optimal", n=10):
    return {"n": n, "p": 1, "scenario": "l2", "pref_family": "L", "threshold": threshold,
            "collocation": False, "seed": seed, "status": status, "objective": objective}


# statistics --------------------------------------------------------------------

def test_kruskal_wallis_separated_groups():
    H, p = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    assert H == 7.2
    assert p == pytest.approx(math.exp(-3.6), rel=1e-12)


def test_kruskal_wallis_identical_values():
    assert kruskal_wallis([[2, 2], [2, 2, 2]]) == (0.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_kruskal_wallis_agrees_with_scipy(seed):
    from scipy import stats

    rng = np.random.default_rng(seed)
    groups = [rng.integers(0, 6, size=k).tolist() for k in (4, 7, 5)]
    H, p = kruskal_wallis(groups)
    ref = stats.kruskal(*groups)
    assert H == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_kruskal_wallis_needs_groups():
    with pytest.raises(ValueError):
        kruskal_wallis([[1, 2]])
    with pytest.raises(ValueError):
        kruskal_wallis([[1], []])


def test_price_of_efficiency_arithmetic():
    rows = [row(0.0, 10.0), row(0.2, 11.0), row(0.8, 10.0), row(0.0, 0.0, seed=1), row(0.2, 3.0, seed=1)]
    pairs, summary = price_of_efficiency(rows)
    assert [(p.threshold, p.pe) for p in pairs] == [(0.2, pytest.approx(0.1)), (0.8, 0.0)]
    assert [s["count"] for s in summary] == [1, 1]


def test_price_of_efficiency_skips_unsolved():
    rows = [row(0.0, 10.0), row(0.2, math.nan, status="no_solution"), row(0.8, 12.0, seed=4)]
    assert price_of_efficiency(rows) == ([], [])


def test_write_pe(tmp_path):
    pairs, summary = price_of_efficiency([row(0.0, 4.0), row(0.2, 5.0), row(0.0, 2.0, seed=1),
                                          row(0.2, 3.0, seed=1)])
    write_pe(pairs, summary, tmp_path / "pe.csv")
    lines = (tmp_path / "pe.csv").read_text().splitlines()
    assert lines[0] == "n,threshold,count,min,median,max"
    assert lines[1] == "10,0.2,2,0.25,0.375,0.5"


def test_threshold_test_groups():
    rows = [row(t, v, seed=s) for s, (t, v) in enumerate([(0.0, 1), (0.0, 2), (0.0, 3), (0.2, 4), (0.2, 5),
                                                            (0.2, 6), (0.8, 7), (0.8, 8), (0.8, 9)])]
    rows.append(row(0.8, 100.0, n=20))
    H, p, groups = threshold_test(rows, n=10)
    assert H == 7.2 and sorted(groups) == [0.0, 0.2, 0.8]
    with pytest.raises(ValueError):
        threshold_test(rows, n=20)


# runner ------------------------------------------------------------------------

def small_matrix(tmp_path, **kw):
    args = dict(n=[3], p=[1], scenario=["l2"], pref_family=["L"], threshold=[0.0], seeds=[0],
                time_limit=60, out_dir=str(tmp_path / "out"))
    args.update(kw)
    return ExperimentMatrix(**args)


def test_single_cell_experiment(tmp_path):
    path = run_experiment(small_matrix(tmp_path))
    rows = read_results(path)
    assert len(rows) == 1
    r = rows[0]
    assert r["status"] == "optimal" and r["max_violation"] <= 1e-5
    direct = solve_instance(generate(GenConfig(n=3, seed=0))).objective
    assert r["objective"] == pytest.approx(direct, rel=1e-6)


def test_resume_skips_finished_cells(tmp_path):
    run_experiment(small_matrix(tmp_path, seeds=[0, 1]))
    seen = []
    path = run_experiment(small_matrix(tmp_path, seeds=[0, 1, 2]), progress=seen.append)
    rows = read_results(path)
    assert [r["seed"] for r in seen] == [2]
    assert sorted(r["seed"] for r in rows) == [0, 1, 2]


def test_crash_is_recorded(tmp_path):
    rows = read_results(run_experiment(small_matrix(tmp_path, scenario=["l2", "bogus"])))
    by = {r["scenario"]: r for r in rows}
    assert by["l2"]["status"] == "optimal"
    assert by["bogus"]["status"] == "error" and by["bogus"]["error"]


def test_time_limit_is_honoured():
    cell = {"n": 50, "p": 5, "scenario": "l2", "pref_family": "L", "threshold": 0.0, "collocation": False,
            "seed": 0}
    r = run_cell(cell, time_limit=1.0, gap=1e-4, engine=None)
    assert r["status"] in ("feasible", "no_solution", "optimal")
    assert r["wall_time"] < 30


def test_parallel_jobs(tmp_path):
    path = run_experiment(small_matrix(tmp_path, seeds=[0, 1, 2]), jobs=2)
    rows = read_results(path)
    assert sorted(r["seed"] for r in rows) == [0, 1, 2]
    assert all(r["status"] == "optimal" for r in rows)


def test_empty_matrix_rejected(tmp_path):
    with pytest.raises(HarnessError):
        small_matrix(tmp_path, seeds=[])


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(HarnessError):
        run_experiment(small_matrix(tmp_path, out_dir=str(blocker / "sub")))


# plots -------------------------------------------------------------------------

def _parse(path):
    return ET.parse(path).getroot()


def test_plot_structure(tmp_path):
    inst = Instance([Region((0, 0), 0.5), Region((3, 0), 0.4, ball_norm=1), Region((1, 2), 0.3, ball_norm=math.inf)],
                    None)
    sol = solve_instance(inst)
    root = _parse(plot_solution(inst, sol, tmp_path / "a.svg"))
    assert len(root.findall("s:path[@class='region']", NS)) == 3
    assert len(root.findall("s:polygon[@class='entry']", NS)) == 3
    assert len(root.findall("s:polygon[@class='facility']", NS)) == 1
    assert len(root.findall("s:line[@class='assign']", NS)) == 3


def test_plot_marks_collocation(tmp_path):
    regions = [Region((0, 0), 0.1), Region((0, 0), 0.1), Region((10, 0), 0.1), Region((10, 0), 0.1)]
    inst = Instance(regions, None, collocation=True)
    sol = solve_instance(inst)
    assert len(sol.collocated) == 2
    root = _parse(plot_solution(inst, sol, tmp_path / "c.svg"))
    assert len(root.findall("s:circle[@class='collocated']", NS)) == 2
    assert len(root.findall("s:polygon[@data-collocated]", NS)) == 4


def test_plot_shades_preferences(tmp_path):
    inst = generate(GenConfig(n=3, pref_family="CD", threshold=0.2, seed=1))
    root = _parse(plot_solution(inst, solve_instance(inst), tmp_path / "h.svg"))
    assert len(root.find("s:g[@class='heat']", NS)) > 0


def test_plot_without_solution(tmp_path):
    inst = generate(GenConfig(n=4, seed=2))
    empty = Solution(None, None, [], [], math.nan, "no_solution")
    root = _parse(plot_solution(inst, empty, tmp_path / "n.svg"))
    assert len(root.findall("s:path[@class='region']", NS)) == 4
    assert not root.findall("s:polygon[@class='facility']", NS)


def test_plot_rejects_non_planar(tmp_path):
    inst = Instance([Region((0, 0, 0), 1.0)], None)
    with pytest.raises(ValueError):
        plot_solution(inst, None, tmp_path / "x.svg")
