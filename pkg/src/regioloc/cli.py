"""Command line interface: ``python -m regioloc <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 infeasible, 3 time limit hit
without any feasible point.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import gen, harness, oracle, prefs
from .mibb import BnBConfig, MIStatus
from .model import Solution, normalize_instance, solve_instance, validate_solution

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_LIMIT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _words(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="regioloc", description="Regional continuous location with preferences.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a random instance")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--p", type=int, default=1)
    g.add_argument("--scenario", choices=gen.SCENARIOS, default="l2")
    g.add_argument("--family", default="L", type=str.upper, choices=gen.FAMILIES)
    g.add_argument("--threshold", type=float, default=0.0)
    g.add_argument("--collocation", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blob-clusters", type=int, default=3)
    g.add_argument("--blob-std", type=float, default=1.0)
    g.add_argument("--from-csv", help="take regions from a CSV file instead of sampling them")
    g.add_argument("--out", required=True)

    s = sub.add_parser("solve", help="solve an instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--collocation", action="store_true", help="force the collocation model")
    s.add_argument("--weighted-collocation", action="store_true", help="weight the collocation objective")
    s.add_argument("--engine", default=None, help="builtin | ipm | external:<path> (default ipm)")
    s.add_argument("--time-limit", type=float, default=3600.0)
    s.add_argument("--gap", type=float, default=1e-4)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--node-log", help="write the per-node CSV log here")
    s.add_argument("--out", help="solution JSON path")

    e = sub.add_parser("experiment", help="run an experiment matrix")
    e.add_argument("--n", type=_ints, required=True, help="comma list, ranges allowed (5,10-12)")
    e.add_argument("--p", type=_ints, default=[1])
    e.add_argument("--scenario", type=_words, default=["l2"])
    e.add_argument("--family", type=_words, default=["L"])
    e.add_argument("--threshold", type=_floats, default=[0.0])
    e.add_argument("--seeds", type=_ints, default=[0])
    e.add_argument("--collocation", choices=("off", "on", "both"), default="off")
    e.add_argument("--time-limit", type=float, default=3600.0)
    e.add_argument("--gap", type=float, default=1e-4)
    e.add_argument("--engine", default=None)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--blob-clusters", type=int, default=3)
    e.add_argument("--blob-std", type=float, default=1.0)
    e.add_argument("--out-dir", default="results")

    a = sub.add_parser("analyze", help="price of efficiency and Kruskal-Wallis on a results CSV")
    a.add_argument("--pe", metavar="RESULTS", help="price-of-efficiency table")
    a.add_argument("--kw", metavar="RESULTS", help="Kruskal-Wallis test across thresholds")
    a.add_argument("--n", type=int, help="restrict the test to one instance size")
    a.add_argument("--out", help="CSV destination for the PE table (default stdout)")

    pl = sub.add_parser("plot", help="draw an instance and optionally a solution as SVG")
    pl.add_argument("--instance", required=True)
    pl.add_argument("--solution")
    pl.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="brute-force references (small instances only)")
    o.add_argument("kind", choices=("weber", "enum", "normalize"))
    o.add_argument("--instance", required=True)
    o.add_argument("--samples", type=int, default=100_000)
    o.add_argument("--weighted-collocation", action="store_true")
    return ap


def _gen(args) -> int:
    if args.from_csv:
        inst = gen.import_csv(args.from_csv, args.p, args.threshold, args.collocation)
    else:
        inst = gen.generate(gen.GenConfig(args.n, args.p, args.scenario, args.family, args.threshold,
                                          args.collocation, args.seed, args.blob_clusters, args.blob_std))
    gen.save(inst, args.out)
    print(f"wrote {args.out} ({inst.n} regions)")
    return EXIT_OK


def _solve(args) -> int:
    inst = gen.load(args.instance)
    if args.collocation:
        inst.collocation = True
    cfg = BnBConfig(rel_gap=args.gap, time_limit=args.time_limit, threads=args.threads)
    try:
        norm = normalize_instance(inst)
        if args.node_log:
            with open(args.node_log, "w") as log_fh:
                sol = solve_instance(inst, cfg, args.engine, args.weighted_collocation, progress=log_fh,
                                     norm_prefs=norm)
        else:
            sol = solve_instance(inst, cfg, args.engine, args.weighted_collocation, norm_prefs=norm)
    except prefs.InfeasibleThreshold as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.out:
        sol.save(args.out)
    print(json.dumps({k: v for k, v in sol.to_dict().items() if k not in ("facilities", "entries")}))
    if sol.status == MIStatus.INFEASIBLE.value:
        return EXIT_INFEASIBLE
    if not sol.has_point:
        return EXIT_LIMIT
    rep = validate_solution(inst, sol, norm, weighted_collocation=args.weighted_collocation)
    if rep.above(1e-5):
        print(f"warning: solution violates constraints by up to {rep.max_violation():.3g}", file=sys.stderr)
    return EXIT_OK


def _experiment(args) -> int:
    colloc = {"off": [False], "on": [True], "both": [False, True]}[args.collocation]
    matrix = harness.ExperimentMatrix(args.n, args.p, args.scenario, [f.upper() for f in args.family],
                                      args.threshold, args.seeds, colloc, args.time_limit, args.gap,
                                      args.engine, args.out_dir, args.blob_clusters, args.blob_std)

    def report(row):
        print(f"n={row['n']} p={row['p']} {row['scenario']} {row['pref_family']} t={row['threshold']} "
              f"seed={row['seed']}: {row['status']} {row['objective']:.6g} ({row['wall_time']:.1f}s)", flush=True)

    path = harness.run_experiment(matrix, args.jobs, report)
    print(f"results in {path}")
    return EXIT_OK


def _analyze(args) -> int:
    if not (args.pe or args.kw):
        raise _UsageError("analyze needs --pe or --kw")
    if args.pe:
        pairs, summary = harness.price_of_efficiency(harness.read_results(args.pe))
        if args.out:
            harness.write_pe(pairs, summary, args.out)
        else:
            print("n,threshold,count,min,median,max")
            for s in summary:
                print(f"{s['n']},{s['threshold']},{s['count']},{s['min']:.6g},{s['median']:.6g},{s['max']:.6g}")
    if args.kw:
        H, pv, groups = harness.threshold_test(harness.read_results(args.kw), args.n)
        sizes = ", ".join(f"{t}: {len(v)}" for t, v in sorted(groups.items()))
        print(f"H = {H:.6g}, p = {pv:.6g} (group sizes {sizes})")
    return EXIT_OK


def _plot(args) -> int:
    inst = gen.load(args.instance)
    sol = None
    if args.solution:
        with open(args.solution) as fh:
            sol = Solution.from_dict(json.load(fh))
    harness.plot_solution(inst, sol, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _oracle(args) -> int:
    inst = gen.load(args.instance)
    if args.kind == "weber":
        x, val = oracle.grid_weber(inst)
        print(json.dumps({"point": x.tolist(), "objective": val}))
    elif args.kind == "enum":
        res = oracle.enumerate_best(inst, weighted_collocation=args.weighted_collocation)
        print(json.dumps({"objective": res.objective, "assignment": res.assignment,
                          "collocated": [list(e) for e in res.collocated], "subproblems": res.subproblems}))
    else:
        rows = []
        for i, (spec, region) in enumerate(zip(inst.prefs, inst.regions)):
            if spec is None:
                continue
            lo, hi = oracle.sample_normalize(spec, region, args.samples, seed=i)
            exact = prefs.normalize(spec, region)
            rows.append({"region": i, "sampled": [lo, hi], "exact": [exact.lb, exact.ub]})
        print(json.dumps(rows, indent=1))
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {"gen": _gen, "solve": _solve, "experiment": _experiment, "analyze": _analyze, "plot": _plot,
            "oracle": _oracle}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (gen.InstanceFormatError, oracle.OracleError, harness.HarnessError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
