"""Synthetic planar scenes, trajectories, point observations and pose perturbation.

A scene is a box room centred on the global origin (6 wall/floor/ceiling
planes) plus randomly oriented rectangular patches inside it. A sensor
trajectory moves through the room; every pose that sees a patch records
points sampled uniformly on the visible part of it, displaced along the
plane normal by Gaussian noise, and stored in the sensor frame. Data
association is exact by construction.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InfeasibleScene
from .geometry import PlaneCP, PlaneHesse, Pose, fit_plane, plane_to_cp, plane_to_global, pose_compose, pose_inverse
from .problem import Observation, ProblemGraph, ProblemState

log = logging.getLogger(__name__)

MIN_PLANE_OFFSET = 0.1
MIN_SENSOR_DISTANCE = 0.3
SAMPLING_ROUNDS = 10

NOISE_LEVELS = {
    1: (0.1, 0.01),
    2: (0.5, 0.03),
    3: (1.0, 0.05),
}


@dataclass
class SceneSpec:
    room_extent: tuple[float, float, float] = (10.0, 8.0, 3.0)
    extra_planes: int = 6
    trajectory: str = "circle"
    n_poses: int = 200
    points_per_observation: int = 200
    point_noise_sigma: float = 0.01
    max_range: float = 8.0
    max_incidence: float = 80.0
    seed: int = 0

    def __post_init__(self):
        self.room_extent = tuple(float(v) for v in self.room_extent)
        if len(self.room_extent) != 3 or min(self.room_extent) <= 2 * MIN_PLANE_OFFSET:
            raise ValueError(f"room_extent must be 3 positive sizes, got {self.room_extent}")
        if self.trajectory not in ("circle", "random_walk"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.extra_planes < 0 or self.n_poses < 1 or self.points_per_observation < 1:
            raise ValueError("extra_planes, n_poses and points_per_observation must be positive")
        if self.point_noise_sigma < 0 or self.max_range <= 0 or not 0 < self.max_incidence < 90:
            raise ValueError("invalid noise sigma, range or incidence limit")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_extent"] = list(self.room_extent)
        return d


@dataclass
class NoiseSpec:
    sigma_rot: float
    sigma_trans: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma_rot < 0 or self.sigma_trans < 0:
            raise ValueError("noise sigmas must be nonnegative")

    @classmethod
    def level(cls, level: int, seed: int = 0) -> "NoiseSpec":
        if level not in NOISE_LEVELS:
            raise ValueError(f"noise level must be one of {sorted(NOISE_LEVELS)}")
        rot, trans = NOISE_LEVELS[level]
        return cls(rot, trans, seed)


@dataclass
class PlanePatch:
    plane: PlaneHesse
    center: np.ndarray
    axes: np.ndarray  # (2, 3) orthonormal in-plane directions
    half_size: np.ndarray  # (2,)


def room_patches(extent) -> list[PlanePatch]:
    half = np.asarray(extent, dtype=float) / 2.0
    patches = []
    for a in range(3):
        others = [b for b in range(3) if b != a]
        for sign in (1.0, -1.0):
            n = np.zeros(3)
            n[a] = sign
            center = sign * half[a] * np.eye(3)[a]
            patches.append(PlanePatch(PlaneHesse(n, -half[a]), center, np.eye(3)[others], half[others]))
    return patches


def _orthonormal_axes(n):
    helper = np.eye(3)[np.argmin(np.abs(n))]
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    return np.stack([a, np.cross(n, a)])


def random_patches(count, extent, rng) -> list[PlanePatch]:
    half = np.asarray(extent, dtype=float) / 2.0
    patches = []
    while len(patches) < count:
        center = rng.uniform(-0.8 * half, 0.8 * half)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        size = rng.uniform(0.5, 1.5, size=2)
        d = -n @ center
        if abs(d) < MIN_PLANE_OFFSET:
            continue
        patches.append(PlanePatch(PlaneHesse.canonical(n, d), center, _orthonormal_axes(n), size))
    return patches


def _euler_pose(position, yaw, pitch, roll) -> Pose:
    R = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
    return Pose(R, position)


def make_trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[Pose]:
    """Smooth sensor trajectory inside the room (circle or bounded random walk)."""
    half = np.asarray(spec.room_extent) / 2.0
    n = spec.n_poses
    poses = []
    if spec.trajectory == "circle":
        radius = 0.25 * min(spec.room_extent[0], spec.room_extent[1])
        for k in range(n):
            a = 2.0 * np.pi * k / n
            p = np.array([radius * np.cos(a), radius * np.sin(a), 0.2 * half[2] * np.sin(3 * a)])
            poses.append(_euler_pose(p, a + np.pi / 2, 0.1 * np.sin(2 * a), 0.1 * np.cos(5 * a)))
        return poses
    bound = np.maximum(half - 1.0, 0.5 * half)
    bound[2] = 0.2 * half[2]
    pos = np.zeros(3)
    heading = rng.uniform(-np.pi, np.pi)
    for k in range(n):
        poses.append(_euler_pose(pos.copy(), heading, 0.1 * np.sin(0.3 * k), 0.1 * np.cos(0.2 * k)))
        heading += rng.normal(0.0, 0.2)
        step = 0.1 * np.array([np.cos(heading), np.sin(heading), 0.0])
        nxt = pos + step
        if np.any(np.abs(nxt[:2]) > bound[:2]):
            heading += np.pi
            nxt = pos - step
        nxt[2] = bound[2] * np.sin(0.05 * k)
        pos = nxt
    return poses


def _sample_visible(patch: PlanePatch, pose: Pose, spec: SceneSpec, rng):
    """Uniform samples on the part of ``patch`` visible from ``pose``, or None."""
    s = pose.translation
    if abs(patch.plane.distance(s)) < MIN_SENSOR_DISTANCE:
        return None
    K = spec.points_per_observation
    cos_max = np.cos(np.radians(spec.max_incidence))
    batch = max(4 * K, 256)
    found, total = [], 0
    for _ in range(SAMPLING_ROUNDS):
        uv = rng.uniform(-1.0, 1.0, size=(batch, 2)) * patch.half_size
        p = patch.center + uv @ patch.axes
        ray = p - s
        dist = np.linalg.norm(ray, axis=1)
        ok = (dist <= spec.max_range) & (np.abs(ray @ patch.plane.normal) >= cos_max * dist)
        found.append(p[ok])
        total += int(ok.sum())
        if total >= K:
            return np.concatenate(found)[:K]
    return None


def generate(spec: SceneSpec) -> ProblemGraph:
    """Build a ground-truth scene and its noisy point observations.

    The returned graph's poses and planes are the ground truth. Its ``meta``
    records the sum of squared noise draws (``noise_sq_sum``), which equals
    the total point-to-plane cost at ground truth.
    """
    rng = np.random.default_rng(spec.seed)
    patches = room_patches(spec.room_extent) + random_patches(spec.extra_planes, spec.room_extent, rng)
    poses = make_trajectory(spec, rng)
    sigma = spec.point_noise_sigma

    raw = []
    noise_sq = 0.0
    draws = 0
    for i, pose in enumerate(poses):
        for j, patch in enumerate(patches):
            pts = _sample_visible(patch, pose, spec, rng)
            if pts is None:
                continue
            eps = rng.normal(0.0, sigma, size=len(pts)) if sigma > 0 else np.zeros(len(pts))
            pts = pts + eps[:, None] * patch.plane.normal
            noise_sq += float(eps @ eps)
            draws += len(eps)
            local = (pts - pose.translation) @ pose.rotation
            raw.append((i, j, local))

    seen = sorted({j for _, j, _ in raw})
    if len(seen) < len(patches):
        log.warning("dropping %d planes that no pose observes", len(patches) - len(seen))
    remap = {j: k for k, j in enumerate(seen)}
    planes = [patches[j].plane for j in seen]
    observations = [Observation(i, remap[j], pts) for i, j, pts in raw]

    per_pose: list[list[np.ndarray]] = [[] for _ in poses]
    for ob in observations:
        per_pose[ob.pose_index].append(planes[ob.plane_index].normal)
    for i, ns in enumerate(per_pose):
        if len(ns) < 3 or np.linalg.matrix_rank(np.array(ns), tol=1e-6) < 3:
            raise InfeasibleScene(f"pose {i} observes {len(ns)} planes without 3 independent normals")

    meta = {"noise_sq_sum": noise_sq, "noise_draws": draws, "spec": spec.to_dict()}
    return ProblemGraph(poses, planes, observations, meta)


def chain_perturbation(poses: list[Pose], errors: list[Pose]) -> list[Pose]:
    """Accumulate per-pose errors along the trajectory.

    ``T^_0 = E_0 T_0`` and ``T^_{i+1} = E_{i+1} (T_{i+1} T_i^-1) T^_i``, so an
    error injected at one pose propagates to all later ones.
    """
    if len(errors) != len(poses):
        raise ValueError("need one error transform per pose")
    out = [pose_compose(errors[0], poses[0])]
    for i in range(1, len(poses)):
        relative = pose_compose(poses[i], pose_inverse(poses[i - 1]))
        out.append(pose_compose(errors[i], pose_compose(relative, out[-1])))
    return out


def draw_errors(n: int, noise: NoiseSpec) -> list[Pose]:
    """Per-pose error transforms; index 0 (the gauge anchor) is the identity."""
    rng = np.random.default_rng(noise.seed)
    errors = [Pose.identity()]
    sr = np.radians(noise.sigma_rot)
    for _ in range(1, n):
        angles = rng.normal(0.0, sr, size=3)
        trans = rng.normal(0.0, noise.sigma_trans, size=3)
        errors.append(Pose(Rotation.from_euler("ZYX", angles).as_matrix(), trans))
    return errors


def perturb(trajectory: list[Pose], noise: NoiseSpec) -> list[Pose]:
    if len(trajectory) < 1:
        raise ValueError("empty trajectory")
    return chain_perturbation(trajectory, draw_errors(len(trajectory), noise))


def initialize_planes(graph: ProblemGraph, poses: list[Pose]) -> list[PlaneCP]:
    """Global CP vectors from local fits at each plane's first observing pose."""
    first: dict[int, Observation] = {}
    for ob in graph.observations:
        cur = first.get(ob.plane_index)
        if cur is None or ob.pose_index < cur.pose_index:
            first[ob.plane_index] = ob
    cps = []
    for j in range(graph.n_planes):
        ob = first[j]
        local = fit_plane(ob.points)
        cps.append(plane_to_cp(plane_to_global(poses[ob.pose_index], local)))
    return cps


def initial_state(graph: ProblemGraph, noise: NoiseSpec) -> ProblemState:
    """Perturbed poses plus planes initialized from them."""
    poses = perturb(graph.poses, noise)
    return ProblemState(poses, initialize_planes(graph, poses))


@dataclass
class Instance:
    graph: ProblemGraph
    init: ProblemState
    noise: NoiseSpec
    extra: dict = field(default_factory=dict)


def make_instance(spec: SceneSpec, noise: NoiseSpec) -> Instance:
    graph = generate(spec)
    return Instance(graph, initial_state(graph, noise), noise)
