"""JSON file formats for datasets, initializations and solver results.

Output is canonical: keys are sorted, there is no insignificant whitespace
variation and every float is written with 17 significant digits, so equal
inputs give byte-identical files and binary64 values round-trip exactly.
Rotations are stored as unit quaternions ``[w, x, y, z]`` with ``w >= 0``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PlaneCP, PlaneHesse, Pose
from .problem import Observation, ProblemGraph, ProblemState

SCHEMA_VERSION = 1
UNIT_TOL = 1e-9


class FormatError(ValueError):
    """A file does not follow the expected schema."""


def _encode(obj) -> str:
    if isinstance(obj, dict):
        items = sorted(obj.items())
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialize non-finite value {x}")
        return format(x, ".17g")
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    return _encode(obj) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be an object")
    return data


def quaternion_from_rotation(R) -> list[float]:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q.tolist()


def rotation_from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise FormatError(f"quaternion must be 4 finite numbers, got {q.tolist()}")
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise FormatError(f"quaternion {q.tolist()} is not unit within {UNIT_TOL:g}")
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def _vec3(v, what) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise FormatError(f"{what} must be 3 finite numbers")
    return a


def encode_pose(p: Pose) -> dict:
    return {"rotation": quaternion_from_rotation(p.rotation), "translation": p.translation.tolist()}


def decode_pose(d) -> Pose:
    try:
        return Pose(rotation_from_quaternion(d["rotation"]), _vec3(d["translation"], "translation"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed pose entry: {exc}") from exc


def _check_version(data, path):
    if data.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: schema_version must be {SCHEMA_VERSION}")


def dataset_to_dict(graph: ProblemGraph) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "poses": [encode_pose(p) for p in graph.poses],
        "planes": [{"normal": p.normal.tolist(), "offset": p.offset} for p in graph.planes],
        "observations": [
            {"pose": o.pose_index, "plane": o.plane_index, "points": o.points.tolist()}
            for o in graph.observations
        ],
        "meta": {k: v for k, v in graph.meta.items() if k in ("noise_sq_sum", "noise_draws", "spec")},
    }


def dataset_from_dict(data: dict, path="dataset") -> ProblemGraph:
    _check_version(data, path)
    try:
        poses = [decode_pose(p) for p in data["poses"]]
        planes = []
        for entry in data["planes"]:
            n = _vec3(entry["normal"], "plane normal")
            if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
                raise FormatError(f"{path}: plane normal {n.tolist()} is not unit within {UNIT_TOL:g}")
            planes.append(PlaneHesse(n, float(entry["offset"])))
        observations = []
        for entry in data["observations"]:
            pose, plane = entry["pose"], entry["plane"]
            if not (isinstance(pose, int) and isinstance(plane, int)):
                raise FormatError(f"{path}: observation indices must be integers")
            pts = np.asarray(entry["points"], dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
                raise FormatError(f"{path}: observation points must be a list of finite [x, y, z]")
            observations.append(Observation(pose, plane, pts))
        return ProblemGraph(poses, planes, observations, dict(data.get("meta", {})))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_dataset(path, graph: ProblemGraph) -> None:
    write_json(path, dataset_to_dict(graph))


def read_dataset(path) -> ProblemGraph:
    return dataset_from_dict(read_json(path), path)


def state_to_dict(state: ProblemState, **extra) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "poses": [encode_pose(p) for p in state.poses],
        "plane_cps": [c.cp.tolist() for c in state.plane_cps],
    }
    out.update(extra)
    return out


def state_from_dict(data: dict, path="state") -> ProblemState:
    _check_version(data, path)
    try:
        poses = [decode_pose(p) for p in data["poses"]]
        cps = [PlaneCP(_vec3(c, "plane CP vector")) for c in data["plane_cps"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ProblemState(poses, cps)


def write_state(path, state: ProblemState, **extra) -> None:
    write_json(path, state_to_dict(state, **extra))


def read_state(path) -> tuple[ProblemState, dict]:
    data = read_json(path)
    return state_from_dict(data, path), data


def report_to_dict(report) -> dict:
    return {
        "method": report.method,
        "iterations": report.iterations,
        "termination": report.termination,
        "initial_cost": report.initial_cost,
        "final_cost": report.final_cost,
        "qr_time": report.qr_time,
        "init_time": report.init_time,
        "optimization_time": report.optimization_time,
        "per_iteration_time": report.per_iteration_time,
    }


TRACE_COLUMNS = ("iteration", "cost", "lambda", "step_norm", "wall_time_seconds")


def trace_csv(report) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in report.trace:
        lines.append(f"{row.iteration},{row.cost!r},{row.lam!r},{row.step_norm!r},{row.wall_time!r}")
    return "\n".join(lines) + "\n"
