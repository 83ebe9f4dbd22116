"""The PBA problem graph: poses, global planes and per-pose point observations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import CP_EPS, PlaneCP, PlaneHesse, Pose, plane_to_cp
from .errors import DegeneratePlane

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Observation:
    """Points (sensor frame) that pose ``pose_index`` recorded on plane ``plane_index``."""

    pose_index: int
    plane_index: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("observation needs at least one point")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class ProblemGraph:
    """Poses (index 0 is the gauge anchor), global planes and observations.

    ``poses`` and ``planes`` carry reference values (ground truth for
    synthetic data); solvers work on a separate :class:`ProblemState`.
    """

    poses: list[Pose]
    planes: list[PlaneHesse]
    observations: list[Observation]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N, M = len(self.poses), len(self.planes)
        if N < 1 or M < 1:
            raise ValueError("graph needs at least one pose and one plane")
        seen = set()
        for ob in self.observations:
            if not (0 <= ob.pose_index < N and 0 <= ob.plane_index < M):
                raise ValueError(f"observation ({ob.pose_index}, {ob.plane_index}) out of range")
            key = (ob.pose_index, ob.plane_index)
            if key in seen:
                raise ValueError(f"duplicate observation for pose {key[0]}, plane {key[1]}")
            seen.add(key)
        poses_seen = {i for i, _ in seen}
        planes_seen = {j for _, j in seen}
        if len(poses_seen) != N:
            raise ValueError(f"poses {sorted(set(range(N)) - poses_seen)} have no observations")
        if len(planes_seen) != M:
            raise ValueError(f"planes {sorted(set(range(M)) - planes_seen)} are never observed")

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    @property
    def n_planes(self) -> int:
        return len(self.planes)

    @property
    def n_points(self) -> int:
        return sum(ob.n_points for ob in self.observations)

    def reference_state(self) -> "ProblemState":
        return ProblemState(list(self.poses), [plane_to_cp(p) for p in self.planes])


@dataclass(eq=False)
class ProblemState:
    """Iterate of the optimization: all poses and the CP vector of every plane."""

    poses: list[Pose]
    plane_cps: list[PlaneCP]

    def arrays(self):
        """Stacked ``(R, t, cp)`` arrays of shapes (N,3,3), (N,3), (M,3)."""
        R = np.stack([p.rotation for p in self.poses])
        t = np.stack([p.translation for p in self.poses])
        cp = np.stack([c.cp for c in self.plane_cps])
        return R, t, cp

    @classmethod
    def from_arrays(cls, R, t, cp) -> "ProblemState":
        return cls([Pose(R[i], t[i]) for i in range(len(R))], [PlaneCP(c) for c in cp])


def observation_residuals(R, t, n, d, points) -> np.ndarray:
    """Signed point-to-plane distances ``n . (R p + t) + d`` for one observation."""
    return (points @ R.T + t) @ n + d


def planes_from_cps(cp: np.ndarray, eps: float = CP_EPS):
    """Vectorized CP -> (normal, offset) with the canonical sign ``offset < 0``."""
    s = np.linalg.norm(cp, axis=-1)
    if np.any(s < eps):
        bad = np.flatnonzero(s < eps)
        raise DegeneratePlane(f"closest-point vectors of planes {bad.tolist()} are degenerate")
    return -cp / s[..., None], -s


def total_cost(graph: ProblemGraph, state: ProblemState) -> float:
    """Sum of squared point-to-plane distances over every observed point."""
    R, t, cp = state.arrays()
    n, d = planes_from_cps(cp)
    cost = 0.0
    for ob in graph.observations:
        i, j = ob.pose_index, ob.plane_index
        r = observation_residuals(R[i], t[i], n[j], d[j], ob.points)
        cost += float(r @ r)
    return cost


@dataclass
class ObservabilityReport:
    planes_per_pose: list[int]
    normal_rank: list[int]
    warnings: list[str]


def observability_check(graph: ProblemGraph, rank_tol: float = 1e-6) -> ObservabilityReport:
    """Flag non-anchor poses whose observed plane normals span fewer than 3 directions."""
    normals: list[list[np.ndarray]] = [[] for _ in range(graph.n_poses)]
    for ob in graph.observations:
        normals[ob.pose_index].append(graph.planes[ob.plane_index].normal)
    counts, ranks, warnings = [], [], []
    for i, ns in enumerate(normals):
        counts.append(len(ns))
        rank = int(np.linalg.matrix_rank(np.array(ns), tol=rank_tol)) if ns else 0
        ranks.append(rank)
        if i > 0 and rank < 3:
            msg = f"pose {i} observes {len(ns)} planes with normal-span rank {rank}; underconstrained"
            log.warning(msg)
            warnings.append(msg)
    return ObservabilityReport(counts, ranks, warnings)
