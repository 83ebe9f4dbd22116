"""``planar-ba`` command line: generate, perturb, solve, evaluate, bench.

Exit codes: 0 success, 2 usage or unreadable input, 3 infeasible scene,
4 degenerate data, 5 diverged solve.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import formats
from .errors import DegenerateFit, DegeneratePlane, DivergedNaN, InfeasibleScene, LengthMismatch, SingularSystem
from .evaluation import BENCH_COLUMNS, assembly_benchmark, ate, bench_summary, compare_runs, rows_to_csv
from .problem import ProblemState
from .solver import METHODS, LMConfig, solve
from .synth import NOISE_LEVELS, NoiseSpec, SceneSpec, generate, initial_state, initialize_planes, perturb

log = logging.getLogger("planar_ba")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def _scene_spec(args) -> SceneSpec:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return SceneSpec(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config: {exc}") from exc


def _noise_spec(args) -> NoiseSpec:
    explicit = args.sigma_rot is not None or args.sigma_trans is not None
    if explicit and args.level is not None:
        raise UsageError("give either --level or --sigma-rot/--sigma-trans, not both")
    seed = args.seed if args.seed is not None else 0
    if explicit:
        if args.sigma_rot is None or args.sigma_trans is None:
            raise UsageError("--sigma-rot and --sigma-trans must be given together")
        try:
            return NoiseSpec(args.sigma_rot, args.sigma_trans, seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return NoiseSpec.level(args.level if args.level is not None else 1, seed)


def _lm_config(args) -> LMConfig:
    try:
        return LMConfig(method=args.method, max_iterations=args.max_iters,
                        function_tolerance=args.ftol, parameter_tolerance=args.ptol)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args) -> int:
    spec = _scene_spec(args)
    graph = generate(spec)
    formats.write_dataset(args.out, graph)
    log.info("wrote %d poses, %d planes, %d observations to %s", graph.n_poses, graph.n_planes,
             len(graph.observations), args.out)
    return EXIT_OK


def cmd_perturb(args) -> int:
    noise = _noise_spec(args)
    graph = formats.read_dataset(args.dataset)
    poses = perturb(graph.poses, noise)
    state = ProblemState(poses, initialize_planes(graph, poses))
    formats.write_state(args.out, state, noise={"sigma_rot": noise.sigma_rot,
                                               "sigma_trans": noise.sigma_trans, "seed": noise.seed})
    return EXIT_OK


def cmd_solve(args) -> int:
    graph = formats.read_dataset(args.dataset)
    init, _ = formats.read_state(args.init)
    if len(init.poses) != graph.n_poses or len(init.plane_cps) != graph.n_planes:
        raise UsageError(f"initialization has {len(init.poses)} poses / {len(init.plane_cps)} planes, "
                         f"dataset has {graph.n_poses} / {graph.n_planes}")
    final, report = solve(graph, init, _lm_config(args))
    formats.write_state(args.out, final, report=formats.report_to_dict(report))
    if args.trace:
        Path(args.trace).write_text(formats.trace_csv(report), encoding="utf-8")
    print(f"{report.method}: {report.termination} after {report.iterations} iterations, "
          f"cost {report.initial_cost:.6g} -> {report.final_cost:.6g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    graph = formats.read_dataset(args.dataset)
    state, data = formats.read_state(args.result)
    try:
        err = ate(graph.poses, state.poses)
    except LengthMismatch as exc:
        raise UsageError(str(exc)) from exc
    print(f"ate_rot {err.ate_rot:.6g}")
    print(f"ate_trans {err.ate_trans:.6g}")
    if args.csv:
        rep = data.get("report")
        if rep is None:
            raise UsageError(f"{args.result} has no solver report to tabulate")
        row = compare_runs([_ReportView(rep)], [err])
        path = Path(args.csv)
        text = rows_to_csv(row)
        if path.exists() and path.stat().st_size > 0:
            text = text.split("\n", 1)[1]
        with path.open("a", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


class _ReportView:
    """Attribute access to a serialized solver report."""

    def __init__(self, d: dict):
        self.__dict__.update(d)


def cmd_bench(args) -> int:
    try:
        ks = sorted(int(k) for k in args.ks.split(","))
        methods = [m.strip() for m in args.methods.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --ks: {exc}") from exc
    if any(m not in ("reduced", "direct") for m in methods) or min(ks) < 1:
        raise UsageError("bench methods must be reduced/direct and K positive")
    seed = args.seed if args.seed is not None else 0
    spec = SceneSpec(n_poses=args.poses, points_per_observation=max(ks), seed=seed)
    graph = generate(spec)
    state = initial_state(graph, NoiseSpec.level(1, seed))
    rows = assembly_benchmark(graph, state, ks, methods)
    text = rows_to_csv(rows, BENCH_COLUMNS)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    summary = bench_summary(rows)
    for m, r in summary["ratio"].items():
        print(f"# {m}: assembly time ratio K={ks[-1]} vs K={ks[0]}: {r:.3g}")
    for k, s in summary.get("speedup", {}).items():
        print(f"# K={k}: reduced speedup {s:.3g}x")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planar-ba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def seed(p):
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit RNG seed")

    p = sub.add_parser("generate", help="build a synthetic scene with ground truth")
    p.add_argument("--config", help="JSON object with scene settings")
    seed(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("perturb", help="perturb poses and initialize planes")
    p.add_argument("dataset")
    p.add_argument("--level", type=int, choices=sorted(NOISE_LEVELS))
    p.add_argument("--sigma-rot", type=float, help="degrees")
    p.add_argument("--sigma-trans", type=float, help="meters")
    seed(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("solve", help="refine poses and planes")
    p.add_argument("dataset")
    p.add_argument("init")
    p.add_argument("--method", choices=METHODS, default="reduced")
    p.add_argument("--max-iters", type=int, default=LMConfig.max_iterations)
    p.add_argument("--ftol", type=float, default=LMConfig.function_tolerance)
    p.add_argument("--ptol", type=float, default=LMConfig.parameter_tolerance)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV file for the per-iteration trace")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="absolute trajectory error against ground truth")
    p.add_argument("dataset")
    p.add_argument("result")
    p.add_argument("--csv", help="append a comparison row to this CSV file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="assembly time versus points per observation")
    p.add_argument("--ks", default="10,100,1000")
    p.add_argument("--methods", default="reduced,direct")
    p.add_argument("--poses", type=int, default=50)
    seed(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, formats.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleScene as exc:
        print(f"error: infeasible scene: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DegeneratePlane, DegenerateFit, SingularSystem) as exc:
        print(f"error: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergedNaN as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
