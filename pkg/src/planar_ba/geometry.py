"""Rigid-body and plane primitives.

Poses map sensor coordinates into the global frame, ``p_g = R p_s + t``.
Planes use the Hesse normal form ``n . p + d = 0`` with the canonical sign
``d <= 0`` (``d`` is the negative distance of the plane from the origin), or
the three-parameter closest-point (CP) vector ``d * n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, DegeneratePlane

CP_EPS = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix ``[v]x`` such that ``hat(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_angle_axis(axis_angle) -> np.ndarray:
    """Rodrigues exponential map ``exp([w]x)`` for a rotation vector ``w``."""
    w = np.asarray(axis_angle, dtype=float)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion; error O(theta^3) < 1e-24
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rotations_from_angle_axis(W: np.ndarray) -> np.ndarray:
    """Batched :func:`rotation_from_angle_axis` for an (n, 3) array."""
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(W, axis=1)
    K = np.zeros((len(W), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -W[:, 2], W[:, 1]
    K[:, 1, 0], K[:, 1, 2] = W[:, 2], -W[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -W[:, 1], W[:, 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Angle (radians) of the angle-axis form of ``R``; stable near 0 and pi."""
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def angle_axis_from_rotation(R: np.ndarray) -> np.ndarray:
    """Logarithm map of SO(3), returned as a rotation vector."""
    # scipy handles the theta ~ pi branch robustly
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(R).as_rotvec()


def project_to_so3(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a sensor frame into the global frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __repr__(self):
        return f"Pose(rotvec={angle_axis_from_rotation(self.rotation)}, t={self.translation})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def pose_apply(a: Pose, p) -> np.ndarray:
    return a.rotation @ np.asarray(p, dtype=float) + a.translation


@dataclass(frozen=True, eq=False)
class PlaneHesse:
    """Plane ``normal . p + offset = 0`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(3))
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def canonical(cls, normal, offset) -> "PlaneHesse":
        """Normalize ``normal`` and pick the sign with ``offset <= 0``.

        For ``offset == 0`` the first nonzero normal component is made positive.
        """
        n = np.asarray(normal, dtype=float).reshape(3)
        scale = np.linalg.norm(n)
        if scale == 0.0:
            raise DegeneratePlane("plane normal is the zero vector")
        n = n / scale
        d = float(offset) / scale
        if d > 0.0:
            n, d = -n, -d
        elif d == 0.0:
            nz = np.flatnonzero(n)
            if n[nz[0]] < 0.0:
                n = -n
            d = 0.0
        return cls(n, d)

    def as_vector(self) -> np.ndarray:
        return np.append(self.normal, self.offset)

    def distance(self, p) -> float:
        return float(self.normal @ np.asarray(p, dtype=float) + self.offset)


@dataclass(frozen=True, eq=False)
class PlaneCP:
    """Closest-point encoding ``offset * normal`` of a plane."""

    cp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cp", np.asarray(self.cp, dtype=float).reshape(3))


def plane_to_cp(p: PlaneHesse) -> PlaneCP:
    if p.offset == 0.0:
        raise DegeneratePlane("plane through the origin has no closest-point vector")
    return PlaneCP(p.offset * p.normal)


def cp_to_plane(c: PlaneCP, eps: float = CP_EPS) -> PlaneHesse:
    s = float(np.linalg.norm(c.cp))
    if s < eps:
        raise DegeneratePlane(f"closest-point vector norm {s:.3g} below {eps:g}")
    return PlaneHesse(-c.cp / s, -s)


def transform_plane(pose: Pose, global_plane: PlaneHesse) -> PlaneHesse:
    """Express a global plane in the sensor frame of ``pose`` (``pi_s = T^T pi_g``)."""
    n_s = pose.rotation.T @ global_plane.normal
    d_s = global_plane.normal @ pose.translation + global_plane.offset
    return PlaneHesse.canonical(n_s, d_s)


def plane_to_global(pose: Pose, local_plane: PlaneHesse) -> PlaneHesse:
    """Inverse of :func:`transform_plane` (``pi_g = T^-T pi_s``)."""
    n_g = pose.rotation @ local_plane.normal
    return PlaneHesse.canonical(n_g, local_plane.offset - n_g @ pose.translation)


def point_to_plane_residual(pose: Pose, plane: PlaneHesse, point) -> float:
    """Signed distance of the sensor-frame ``point`` to the global ``plane``."""
    return float(plane.normal @ (pose.rotation @ np.asarray(point, dtype=float) + pose.translation) + plane.offset)


def fit_plane(points) -> PlaneHesse:
    """Total-least-squares plane through ``points`` (K x 3, K >= 3)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise DegenerateFit(f"need at least 3 points, got {len(P)}")
    centroid = P.mean(axis=0)
    X = P - centroid
    cov = X.T @ X / len(P)
    evals, evecs = np.linalg.eigh(cov)
    # collinear or coincident: the two smallest eigenvalues tie (possibly at 0)
    if evals[1] - evals[0] <= 1e-12 * max(evals[2], np.finfo(float).tiny):
        raise DegenerateFit("points are collinear or coincident")
    n = evecs[:, 0]
    return PlaneHesse.canonical(n, -n @ centroid)
