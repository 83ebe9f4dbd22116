"""Reduced Jacobians and residuals for the point-to-plane cost.

Every residual of an observation is linear in a 13-vector ``nu`` of state
products, ``delta_k = c_k . nu`` with a constant coefficient row ``c_k``
built from the point. Stacking the rows gives ``C`` (K x 13), whose 13
columns are copies of the 4 columns of ``E = [x y z 1]``. A thin QR
``E = Q U`` yields ``C = Q M`` with ``M`` of at most 4 rows, and because
``Q^T Q = I`` the products ``M V`` and ``M nu`` reproduce ``J^T J``,
``J^T delta`` and the cost of the full K-row blocks exactly.

Layout of ``nu`` (row-major ``R``, ``n`` the unit normal, ``d`` the offset)::

    [R11 n1, R12 n1, R13 n1, R21 n2, R22 n2, R23 n2, R31 n3, R32 n3, R33 n3,
     n1 t1, n2 t2, n3 t3, d]

Pose increments are ``[theta; dt]`` with ``R <- R exp([theta]x)`` and
``t <- t + dt``; plane increments are additive on the CP vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CP_EPS, PlaneCP, Pose
from .errors import DegeneratePlane

N_NU = 13
POSE_DIM = 6
PLANE_DIM = 3

# column of E that feeds each of the 13 coefficient slots
SLOT_SOURCE = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 3, 3, 3, 3])


QR_CHUNK = 128  # matrices per pass; keeps the working set cache-resident
TINY = np.finfo(float).tiny


def _householder(A: np.ndarray, r: int, start: int = 0, keep: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Triangularize a stack of matrices in place.

    ``A`` has shape (n, b, K): ``A[c, j]`` is column c of matrix j, stored
    contiguously so every update is a flat array operation. Column i is
    reflected onto row ``start + i``; entries below that row are left stale
    and callers read the factor through ``triu``. With ``keep`` the
    reflectors come back as full-length ``(v, s)`` pairs with
    ``H = I - s v v^T``; ``s = 0`` marks a column already zero below its
    pivot.
    """
    n, b, _ = A.shape
    reflectors = []
    for i in range(r):
        p = start + i
        col = A[i]
        v = col.copy()
        v[:, :p] = 0.0
        x0 = col[:, p]
        # v = x + sign(x0) |x| e_p maps x to -sign(x0) |x| e_p; h = v^T v / 2
        sx = np.copysign(np.sqrt(np.einsum("bk,bk->b", v, v)), x0)
        h = sx * (sx + x0)
        if i + 1 < n or keep:
            # columns whose norm squared underflows count as zero
            scale = np.divide(1.0, h, out=np.zeros(b), where=h >= TINY)
            v[:, p] += sx
            for c in range(i + 1, n):
                proj = np.einsum("bk,bk->b", A[c], v)
                proj *= scale
                A[c] -= proj[:, None] * v
            if keep:
                reflectors.append((v, scale))
        x0[:] = -sx
    return reflectors


def _diagonal_signs(U: np.ndarray) -> np.ndarray:
    """+-1 per row of a stack of factors so that the diagonal becomes non-negative."""
    r = U.shape[-2]
    d = np.sign(U[..., np.arange(r), np.arange(r)])
    d[d == 0.0] = 1.0
    return d


def householder_qr(A: np.ndarray, want_q: bool = False):
    """Thin QR of a matrix or a stack of matrices via Householder reflections.

    ``A`` has shape (..., K, n). Returns ``U`` of shape (..., r, n) with
    ``r = min(K, n)``, upper triangular in its leading r x r part with a
    non-negative diagonal, and optionally ``Q`` of shape (..., K, r) with
    orthonormal columns such that ``Q @ U == A``. Rank-deficient inputs are
    fine: a zero column below the diagonal simply skips its reflection.
    """
    A = np.asarray(A, dtype=float)
    batch_shape = A.shape[:-2]
    K, n = A.shape[-2:]
    r = min(K, n)
    At = A.reshape((-1, K, n)).transpose(2, 0, 1).copy()
    B = At.shape[1]
    Qt = np.zeros((r, B, K)) if want_q else None
    if want_q:
        Qt[np.arange(r), :, np.arange(r)] = 1.0
    for s in range(0, B, QR_CHUNK):
        reflectors = _householder(At[:, s:s + QR_CHUNK], r, keep=want_q)
        # Q^T = H_{r-1} ... H_0 restricted to its first r rows
        for v, scale in reversed(reflectors):
            for row in Qt[:, s:s + QR_CHUNK]:
                proj = np.einsum("bk,bk->b", row, v)
                proj *= scale
                row -= proj[:, None] * v
    U = np.triu(At[:, :, :r].transpose(1, 2, 0))
    d = _diagonal_signs(U)
    U *= d[:, :, None]
    U = U.reshape(batch_shape + (r, n))
    if not want_q:
        return U
    Q = Qt.transpose(1, 2, 0) * d[:, None, :]
    return Q.reshape(batch_shape + (K, r)), U


def build_coefficients(points) -> np.ndarray:
    """Stack the coefficient rows ``[x y z x y z x y z 1 1 1 1]`` into C (K x 13)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    E = np.hstack([P, np.ones((len(P), 1))])
    return E[:, SLOT_SOURCE]


def expand_generators(U: np.ndarray) -> np.ndarray:
    """Place the 4 columns of U into the 13 slots of M (works on stacks)."""
    return U[..., SLOT_SOURCE]


@dataclass(frozen=True, eq=False)
class ReducedBlock:
    """The r x 13 matrix M with ``C = Q M``, r = min(K, 4)."""

    m: np.ndarray
    pose_index: int = -1
    plane_index: int = -1

    @property
    def rows(self) -> int:
        return self.m.shape[0]


def factorize(points, pose_index: int = -1, plane_index: int = -1) -> ReducedBlock:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    E = np.hstack([P, np.ones((len(P), 1))])
    U = householder_qr(E)
    return ReducedBlock(expand_generators(U), pose_index, plane_index)


def factorize_many(point_sets) -> np.ndarray:
    """Factorize many observations at once.

    Returns a (n_obs, 4, 13) stack of M matrices; observations with K < 4
    are padded with zero rows, which leaves every product the solver forms
    unchanged. Observations are batched by point count.

    Each E is first reduced with its columns ordered [1 x y z]: the
    reflector for the ones column is known in closed form and costs one
    column sum, so only the point columns go through the general kernel. A
    second Householder pass brings the small factor back to [x y z 1]
    order. Both stages are orthogonal, so ``C = Q M`` still holds with
    orthonormal Q. For full-rank E the result equals ``factorize``; for
    rank-deficient E both are valid factors and may differ.
    """
    point_sets = [P if isinstance(P, np.ndarray) and P.ndim == 2 and P.shape[1] == 3 and P.dtype == float
                  else np.asarray(P, dtype=float).reshape(-1, 3) for P in point_sets]
    W = np.zeros((len(point_sets), 4, 4))  # factors of [1 x y z]
    by_size: dict[int, list[int]] = {}
    for idx, P in enumerate(point_sets):
        by_size.setdefault(len(P), []).append(idx)
    for K, idxs in by_size.items():
        r = min(K, 4)
        rk = np.sqrt(K)
        buf = np.empty((3, min(len(idxs), QR_CHUNK), K))
        for s in range(0, len(idxs), QR_CHUNK):
            part = idxs[s:s + QR_CHUNK]
            A = buf[:, :len(part)]
            for j, i in enumerate(part):
                A[:, j] = point_sets[i].T
            # ones column -> -sqrt(K) e1 with v = 1 + sqrt(K) e1, v^T v = 2 (K + sqrt(K))
            proj = A.sum(axis=-1)
            proj += rk * A[:, :, 0]
            proj /= K + rk
            A -= proj[:, :, None]
            A[:, :, 0] -= rk * proj
            _householder(A, r - 1, start=1)
            W[part, 0, 0] = -rk
            W[part, :r, 1:] = np.triu(A[:, :, :r].transpose(1, 2, 0), -1)
    Wt = W[:, :, [1, 2, 3, 0]].transpose(2, 0, 1).copy()
    _householder(Wt, 4)
    U = np.triu(Wt.transpose(1, 2, 0))
    U *= _diagonal_signs(U)[:, :, None]
    return expand_generators(U)


@dataclass(frozen=True, eq=False)
class StateCoefficients:
    """``nu`` and its derivatives ``V_pose`` (13 x 6) and ``V_plane`` (13 x 3)."""

    nu: np.ndarray
    v_pose: np.ndarray
    v_plane: np.ndarray


def normal_offset_jacobians(cp: np.ndarray, eps: float = CP_EPS):
    """Normal, offset and their derivatives w.r.t. the CP vector (stacked, (n,3))."""
    s = np.linalg.norm(cp, axis=-1)
    if np.any(s < eps):
        raise DegeneratePlane(f"closest-point vector norm {s.min():.3g} below {eps:g}")
    u = cp / s[:, None]
    n = -u
    d = -s
    # n = -cp/|cp|  ->  dn/dcp = -(I - u u^T)/|cp| ;  d = -|cp|  ->  dd/dcp = -u^T
    dn = -(np.eye(3)[None] - u[:, :, None] * u[:, None, :]) / s[:, None, None]
    dd = -u
    return n, d, dn, dd


def _gather(R, t, cp, pose_idx, plane_idx):
    """Per-observation R, t and plane quantities; plane math is done once per plane."""
    n, d, dn, dd = normal_offset_jacobians(cp)
    if pose_idx is not None:
        R, t = R[pose_idx], t[pose_idx]
    if plane_idx is not None:
        n, d, dn, dd = n[plane_idx], d[plane_idx], dn[plane_idx], dd[plane_idx]
    return R, t, n, d, dn, dd


def state_nu(R, t, cp, pose_idx=None, plane_idx=None) -> np.ndarray:
    """``nu`` (n, 13) for every observation; indices default to pairing rows."""
    R, t, n, d, _, _ = _gather(R, t, cp, pose_idx, plane_idx)
    count = len(R)
    nu = np.empty((count, N_NU))
    nu[:, :9] = (R * n[:, :, None]).reshape(count, 9)
    nu[:, 9:12] = n * t
    nu[:, 12] = d
    return nu


def state_stack(R, t, cp, pose_idx=None, plane_idx=None) -> np.ndarray:
    """``[V_pose | V_plane | nu]`` (n, 13, 10) for every observation.

    Multiplying a coefficient block by this stack gives the pose Jacobian,
    the plane Jacobian and the residual in one product.
    """
    R, t, n, d, dn, dd = _gather(R, t, cp, pose_idx, plane_idx)
    count = len(R)
    X = np.zeros((count, N_NU, POSE_DIM + PLANE_DIM + 1))
    rot = X[:, :9].reshape(count, 3, 3, POSE_DIM + PLANE_DIM + 1)  # view: [row i, column j, :]
    rn = R * n[:, :, None]  # R_ij n_i
    rot[..., 9] = rn
    # d(R exp([theta]x))/d theta at 0: row i of R gains r_i x theta, so the
    # block of slots R_i. n_i is n_i [r_i]x = [n_i r_i]x
    x, y, z = rn[..., 0], rn[..., 1], rn[..., 2]
    rot[:, :, 0, 1], rot[:, :, 0, 2] = -z, y
    rot[:, :, 1, 0], rot[:, :, 1, 2] = z, -x
    rot[:, :, 2, 0], rot[:, :, 2, 1] = -y, x
    rot[..., 6:9] = R[:, :, :, None] * dn[:, :, None, :]
    X[:, 9, 3] = n[:, 0]
    X[:, 10, 4] = n[:, 1]
    X[:, 11, 5] = n[:, 2]
    X[:, 9:12, 6:9] = t[:, :, None] * dn
    X[:, 9:12, 9] = n * t
    X[:, 12, 6:9] = dd
    X[:, 12, 9] = d
    return X


def state_coefficients_batch(R: np.ndarray, t: np.ndarray, cp: np.ndarray):
    """Vectorized ``nu``, ``V_pose``, ``V_plane`` for stacks of (R, t, cp).

    Shapes: R (n,3,3), t (n,3), cp (n,3) -> (n,13), (n,13,6), (n,13,3).
    """
    X = state_stack(R, t, cp)
    return X[:, :, 9], X[:, :, :6], X[:, :, 6:9]


def state_coefficients(pose: Pose, plane_cp: PlaneCP) -> StateCoefficients:
    nu, vp, vw = state_coefficients_batch(pose.rotation[None], pose.translation[None], plane_cp.cp[None])
    return StateCoefficients(nu[0], vp[0], vw[0])


@dataclass(frozen=True, eq=False)
class SystemBlocks:
    """Jacobian blocks and residual of one observation (reduced or full).

    ``j_pose`` is ``None`` for the anchor pose, which is held fixed.
    """

    j_pose: np.ndarray | None
    j_plane: np.ndarray
    delta: np.ndarray


def reduced_blocks(block: ReducedBlock, coeffs: StateCoefficients, is_anchor: bool) -> SystemBlocks:
    m = block.m
    return SystemBlocks(None if is_anchor else m @ coeffs.v_pose, m @ coeffs.v_plane, m @ coeffs.nu)


def full_blocks(points, coeffs: StateCoefficients, is_anchor: bool) -> SystemBlocks:
    C = build_coefficients(points)
    return SystemBlocks(None if is_anchor else C @ coeffs.v_pose, C @ coeffs.v_plane, C @ coeffs.nu)
