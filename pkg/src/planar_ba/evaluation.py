"""Trajectory accuracy (ATE) and run comparison tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch
from .geometry import Pose, rotation_angle
from .problem import Observation, ProblemGraph

BENCH_COLUMNS = ("method", "points_per_observation", "observations", "assembly_time", "product_time")

COMPARISON_COLUMNS = (
    "method",
    "iterations",
    "ate_rot",
    "ate_trans",
    "initial_cost",
    "final_cost",
    "qr_time",
    "init_time",
    "optimization_time",
    "per_iteration_time",
)


@dataclass(frozen=True)
class AteResult:
    """RMS rotation error (degrees) and RMS translation error (meters)."""

    ate_rot: float
    ate_trans: float
    per_pose_rot_err: np.ndarray
    per_pose_trans_err: np.ndarray


def ate(ground_truth: list[Pose], estimate: list[Pose]) -> AteResult:
    """Absolute trajectory error without any alignment step.

    With ``dR_k = R_k R^_k^T`` and ``dt_k = t_k - dR_k t^_k`` the rotation
    error is the RMS of the angle of ``dR_k`` and the translation error the
    RMS of ``|dt_k|``. Both trajectories share the fixed first pose, so no
    alignment is needed.
    """
    if len(ground_truth) != len(estimate):
        raise LengthMismatch(f"{len(ground_truth)} ground-truth poses vs {len(estimate)} estimated")
    if not ground_truth:
        raise LengthMismatch("trajectories are empty")
    angles = np.empty(len(ground_truth))
    dists = np.empty(len(ground_truth))
    for k, (gt, est) in enumerate(zip(ground_truth, estimate)):
        dR = gt.rotation @ est.rotation.T
        angles[k] = np.degrees(rotation_angle(dR))
        dists[k] = np.linalg.norm(gt.translation - dR @ est.translation)
    return AteResult(
        float(np.sqrt(np.mean(angles**2))),
        float(np.sqrt(np.mean(dists**2))),
        angles,
        dists,
    )


def compare_runs(reports, ates) -> list[dict]:
    """One row per solver run, with cost, timing and ATE columns."""
    if not reports:
        raise ValueError("no runs to compare")
    if len(reports) != len(ates):
        raise LengthMismatch("need one ATE result per report")
    rows = []
    for rep, err in zip(reports, ates):
        rows.append({
            "method": rep.method,
            "iterations": rep.iterations,
            "ate_rot": err.ate_rot,
            "ate_trans": err.ate_trans,
            "initial_cost": rep.initial_cost,
            "final_cost": rep.final_cost,
            "qr_time": rep.qr_time,
            "init_time": rep.init_time,
            "optimization_time": rep.optimization_time,
            "per_iteration_time": rep.per_iteration_time,
        })
    return rows


def rows_to_csv(rows: list[dict], columns=COMPARISON_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: (repr(float(row[c])) if isinstance(row[c], float) else row[c]) for c in columns})
    return buf.getvalue()


def subsample_points(graph: ProblemGraph, k: int) -> ProblemGraph:
    """Same graph with only the first ``k`` points of every observation."""
    obs = [Observation(o.pose_index, o.plane_index, o.points[:k]) for o in graph.observations]
    return ProblemGraph(graph.poses, graph.planes, obs, dict(graph.meta))


def _best_time(fn, number: int) -> float:
    t0 = time.perf_counter()
    for _ in range(number):
        fn()
    return (time.perf_counter() - t0) / number


def assembly_benchmark(graph: ProblemGraph, state, ks=(10, 100, 1000), methods=("reduced", "direct"),
                       rounds: int = 7, number: int = 5) -> list[dict]:
    """Per-iteration timings for each (method, K).

    ``assembly_time`` covers one full normal-equation assembly.
    ``product_time`` covers only the per-observation products
    ``[J | delta] = B [V | nu]`` and ``[J | delta]^T [J | delta]``, where ``B``
    is the stored M (reduced) or C (direct) block; building ``[V | nu]`` and
    summing into the normal equations do not depend on the row count.

    ``graph`` must carry at least ``max(ks)`` points per observation; smaller
    K values reuse a prefix of the same points, so every row shares one set
    of observations and one state. Configurations are timed round-robin and
    each keeps its best round, which evens out drift on a shared machine.
    """
    from .reduction import state_stack
    from .solver import make_backend

    kmin = min(o.n_points for o in graph.observations)
    if max(ks) > kmin:
        raise ValueError(f"graph has observations with only {kmin} points; need {max(ks)}")
    R, t, cp = state.arrays()
    configs = []
    for k in ks:
        sub = subsample_points(graph, k)
        for method in methods:
            backend = make_backend(sub, method)
            X = state_stack(R, t, cp, backend.pose_idx, backend.plane_idx)

            def products(blocks=backend.blocks, X=X):
                JX = np.matmul(blocks, X)
                return np.matmul(JX.transpose(0, 2, 1), JX)

            def assemble(backend=backend):
                return backend.assemble(R, t, cp)

            configs.append(({"method": method, "points_per_observation": k,
                             "observations": len(sub.observations)}, assemble, products))
    best = [[np.inf, np.inf] for _ in configs]
    for _ in range(rounds):
        for c, (_, assemble, products) in enumerate(configs):
            best[c][0] = min(best[c][0], _best_time(assemble, number))
            best[c][1] = min(best[c][1], _best_time(products, number))
    return [{**info, "assembly_time": a, "product_time": p} for (info, _, _), (a, p) in zip(configs, best)]


def bench_summary(rows: list[dict], key: str = "assembly_time") -> dict:
    """Flatness ratios (largest K vs smallest) per method and reduced speedups per K.

    ``key`` selects the timing column, ``assembly_time`` or ``product_time``.
    """
    by = {(r["method"], r["points_per_observation"]): r[key] for r in rows}
    ks = sorted({r["points_per_observation"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    out = {"ratio": {m: by[(m, ks[-1])] / by[(m, ks[0])] for m in methods}}
    if {"reduced", "direct"} <= set(methods):
        out["speedup"] = {k: by[("direct", k)] / by[("reduced", k)] for k in ks}
    return out
