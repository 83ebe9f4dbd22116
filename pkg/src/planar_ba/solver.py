"""Levenberg-Marquardt with Schur elimination of the plane blocks.

The loop in :func:`run_lm` is shared by three residual models ("backends"):

* ``reduced`` -- the r <= 4 row blocks ``M V`` and ``M nu`` built once from a
  thin QR of each observation,
* ``direct`` -- the full K-row blocks ``C V`` and ``C nu`` (the brute-force
  point-to-plane baseline),
* ``pl2pl`` -- CP-vector plane-to-plane residuals (see :mod:`planar_ba.pl2pl`).

A backend exposes ``cost(R, t, cp)`` and ``assemble(R, t, cp)``; everything
else (damping schedule, step application, termination) is common, so the
reduced and direct runs take identical decisions whenever their normal
equations agree.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.spatial.transform import Rotation

from .errors import DegeneratePlane, DivergedNaN, SingularSystem
from .geometry import project_to_so3, rotations_from_angle_axis
from .problem import ProblemGraph, ProblemState
from .reduction import build_coefficients, factorize_many, state_nu, state_stack

log = logging.getLogger(__name__)

METHODS = ("reduced", "direct", "pl2pl")
TERMINATIONS = ("function_tol", "parameter_tol", "max_iter")


@dataclass
class LMConfig:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iterations: int = 1000
    function_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-10
    method: str = "reduced"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.function_tolerance <= 0 or self.parameter_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("lambda factors must exceed 1")
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be positive")


@dataclass
class NormalEquations:
    """Block form of ``J^T J`` and ``J^T delta`` with the anchor pose removed.

    ``a_blocks[k]`` and ``grad_pose[k]`` belong to pose ``k + 1``. The
    off-diagonal blocks are stored sparsely: ``w_blocks[e]`` couples pose
    ``w_pose[e]`` (a global index >= 1) with plane ``w_plane[e]``.
    """

    a_blocks: np.ndarray
    b_blocks: np.ndarray
    w_pose: np.ndarray
    w_plane: np.ndarray
    w_blocks: np.ndarray
    grad_pose: np.ndarray
    grad_plane: np.ndarray

    @property
    def n_free_poses(self) -> int:
        return len(self.a_blocks)

    @property
    def n_planes(self) -> int:
        return len(self.b_blocks)

    def w_map(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(i), int(j)): w for i, j, w in zip(self.w_pose, self.w_plane, self.w_blocks)}

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.grad_pose.ravel(), self.grad_plane.ravel()])

    def dense(self):
        """Full ``(J^T J, J^T delta)`` as dense arrays; meant for checks on small problems."""
        P, M = self.n_free_poses, self.n_planes
        dp = 6 * P
        H = np.zeros((dp + 3 * M, dp + 3 * M))
        for k in range(P):
            H[6 * k:6 * k + 6, 6 * k:6 * k + 6] = self.a_blocks[k]
        for j in range(M):
            H[dp + 3 * j:dp + 3 * j + 3, dp + 3 * j:dp + 3 * j + 3] = self.b_blocks[j]
        for i, j, w in zip(self.w_pose, self.w_plane, self.w_blocks):
            r, c = 6 * (i - 1), dp + 3 * j
            H[r:r + 6, c:c + 3] = w
            H[c:c + 3, r:r + 6] = w.T
        return H, self.gradient()


class Accumulator:
    """Sums per-observation blocks into :class:`NormalEquations`.

    The observation-to-pose and observation-to-plane incidence matrices are
    built once; summing through them is much faster than ``np.add.at``.
    """

    def __init__(self, pose_idx, plane_idx, n_poses: int, n_planes: int):
        self.pose_idx = np.asarray(pose_idx, dtype=np.intp)
        self.plane_idx = np.asarray(plane_idx, dtype=np.intp)
        self.n_poses, self.n_planes = n_poses, n_planes
        n_obs = len(self.pose_idx)
        ones, obs = np.ones(n_obs), np.arange(n_obs)
        self.to_pose = scipy.sparse.csr_matrix((ones, (self.pose_idx, obs)), shape=(n_poses, n_obs))
        self.to_plane = scipy.sparse.csr_matrix((ones, (self.plane_idx, obs)), shape=(n_planes, n_obs))
        self.free = self.pose_idx > 0

    def __call__(self, j_pose, j_plane, res):
        """``j_pose`` (n, r, 6), ``j_plane`` (n, r, 3) and ``res`` (n, r) -> (ne, cost).

        Rows of the anchor pose's ``j_pose`` are ignored.
        """
        return self.stacked(np.concatenate([j_pose, j_plane, res[:, :, None]], axis=2))

    def stacked(self, JX):
        """Same as calling with ``JX = [J_pose | J_plane | res]`` of shape (n, r, 10)."""
        n_obs = len(JX)
        # a contiguous transpose makes the batched product several times faster
        G = np.matmul(np.ascontiguousarray(JX.transpose(0, 2, 1)), JX)
        cost = float(G[:, 9, 9].sum())
        flat = G.reshape(n_obs, 100)
        per_pose = (self.to_pose @ flat).reshape(self.n_poses, 10, 10)
        per_plane = (self.to_plane @ flat).reshape(self.n_planes, 10, 10)
        A, gp = per_pose[:, :6, :6], per_pose[:, :6, 9]
        B, gw = per_plane[:, 6:9, 6:9], per_plane[:, 6:9, 9]
        ne = NormalEquations(
            a_blocks=A[1:],
            b_blocks=B,
            w_pose=self.pose_idx[self.free],
            w_plane=self.plane_idx[self.free],
            w_blocks=G[self.free, :6, 6:9],
            grad_pose=gp[1:],
            grad_plane=gw,
        )
        return ne, cost


def accumulate(pose_idx, plane_idx, j_pose, j_plane, res, n_poses, n_planes):
    """One-shot :class:`Accumulator` call."""
    return Accumulator(pose_idx, plane_idx, n_poses, n_planes)(j_pose, j_plane, res)


def lm_step(ne: NormalEquations, lam: float) -> np.ndarray:
    """Solve ``(J^T J + lam I) xi = -J^T delta`` by eliminating the plane blocks.

    Returns ``xi = [xi_poses (6 per free pose); xi_planes (3 per plane)]``.
    """
    P, M = ne.n_free_poses, ne.n_planes
    dp = 6 * P
    Bd = ne.b_blocks + lam * np.eye(3)
    try:
        Binv = np.linalg.inv(Bd)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"plane block singular at lambda={lam:g}") from exc
    gp = ne.grad_pose.ravel()
    gw = ne.grad_plane

    if P == 0:
        xw = np.einsum("mij,mj->mi", Binv, -gw)
        return xw.ravel()

    Wd = np.zeros((dp, 3 * M))
    rows = 6 * (ne.w_pose - 1)[:, None, None] + np.arange(6)[None, :, None]
    cols = 3 * ne.w_plane[:, None, None] + np.arange(3)[None, None, :]
    Wd[rows, cols] = ne.w_blocks

    WB = np.einsum("rmi,mij->rmj", Wd.reshape(dp, M, 3), Binv).reshape(dp, 3 * M)
    S = -WB @ Wd.T
    idx = np.arange(P)
    S.reshape(P, 6, P, 6)[idx, :, idx, :] += ne.a_blocks
    S[np.diag_indices(dp)] += lam
    rhs = -gp + WB @ gw.ravel()
    try:
        factor = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"Schur complement not positive definite at lambda={lam:g}") from exc
    xp = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    xw = np.einsum("mij,mj->mi", Binv, -gw - (Wd.T @ xp).reshape(M, 3))
    return np.concatenate([xp, xw.ravel()])


def apply_step(R, t, cp, xi):
    """Right-increment the free rotations, add to translations and CP vectors."""
    P = len(R) - 1
    xp = xi[:6 * P].reshape(P, 6)
    R_new = R.copy()
    t_new = t.copy()
    R_new[1:] = np.matmul(R[1:], rotations_from_angle_axis(xp[:, :3]))
    t_new[1:] = t[1:] + xp[:, 3:]
    drift = np.linalg.norm(np.matmul(R_new[1:].transpose(0, 2, 1), R_new[1:]) - np.eye(3), axis=(1, 2))
    for k in np.flatnonzero(drift > 1e-9):
        R_new[k + 1] = project_to_so3(R_new[k + 1])
    cp_new = cp + xi[6 * P:].reshape(-1, 3)
    return R_new, t_new, cp_new


def state_norm(R, t, cp) -> float:
    parts = [cp.ravel()]
    if len(R) > 1:
        parts += [Rotation.from_matrix(R[1:]).as_rotvec().ravel(), t[1:].ravel()]
    x = np.concatenate(parts)
    return float(np.linalg.norm(x))


class PointToPlaneBackend:
    """Point-to-plane residual model on stacked coefficient blocks.

    ``reduced=True`` stores the QR-reduced M (at most 4 rows per
    observation); ``reduced=False`` stores the full C (K rows, zero-padded
    to the largest K). Both run through identical batched arithmetic, so
    any runtime difference comes from the row count alone.
    """

    def __init__(self, graph: ProblemGraph, reduced: bool = True):
        t0 = time.perf_counter()
        obs = graph.observations
        self.reduced = reduced
        self.n_poses = graph.n_poses
        self.n_planes = graph.n_planes
        self.pose_idx = np.array([o.pose_index for o in obs], dtype=np.intp)
        self.plane_idx = np.array([o.plane_index for o in obs], dtype=np.intp)
        self.qr_time = 0.0
        if reduced:
            tq = time.perf_counter()
            self.blocks = factorize_many([o.points for o in obs])
            self.qr_time = time.perf_counter() - tq
        else:
            kmax = max(o.n_points for o in obs)
            blocks = np.zeros((len(obs), kmax, 13))
            for n, o in enumerate(obs):
                blocks[n, : o.n_points] = build_coefficients(o.points)
            self.blocks = blocks
        self.accumulate = Accumulator(self.pose_idx, self.plane_idx, self.n_poses, self.n_planes)
        self.init_time = time.perf_counter() - t0 - self.qr_time

    def residuals(self, R, t, cp):
        nu = state_nu(R, t, cp, self.pose_idx, self.plane_idx)
        return np.matmul(self.blocks, nu[:, :, None])[:, :, 0]

    def cost(self, R, t, cp) -> float:
        r = self.residuals(R, t, cp)
        return float(np.einsum("nr,nr->", r, r))

    def stacked_blocks(self, R, t, cp):
        """``[J_pose | J_plane | res]`` per observation, shape (n, rows, 10)."""
        return np.matmul(self.blocks, state_stack(R, t, cp, self.pose_idx, self.plane_idx))

    def blocks_at(self, R, t, cp):
        JX = self.stacked_blocks(R, t, cp)
        return JX[:, :, :6], JX[:, :, 6:9], JX[:, :, 9]

    def assemble(self, R, t, cp):
        return self.accumulate.stacked(self.stacked_blocks(R, t, cp))


def make_backend(graph: ProblemGraph, method: str):
    if method == "reduced":
        return PointToPlaneBackend(graph, reduced=True)
    if method == "direct":
        return PointToPlaneBackend(graph, reduced=False)
    if method == "pl2pl":
        from .pl2pl import PlaneToPlaneBackend

        return PlaneToPlaneBackend(graph)
    raise ValueError(f"unknown method {method!r}")


def assemble(graph: ProblemGraph, state: ProblemState, provider: str = "reduced"):
    """Normal equations and cost at ``state`` for the given residual model."""
    backend = make_backend(graph, provider)
    return backend.assemble(*state.arrays())


class TraceRow(NamedTuple):
    iteration: int
    cost: float
    lam: float
    step_norm: float
    wall_time: float


@dataclass
class SolveReport:
    method: str
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    trace: list[TraceRow] = field(default_factory=list)
    qr_time: float = 0.0
    init_time: float = 0.0
    optimization_time: float = 0.0

    @property
    def per_iteration_trace(self) -> list[TraceRow]:
        return self.trace

    @property
    def per_iteration_time(self) -> float:
        return self.optimization_time / self.iterations if self.iterations else 0.0

    @property
    def total_time(self) -> float:
        return self.qr_time + self.init_time + self.optimization_time


def run_lm(backend, R, t, cp, config: LMConfig):
    """Levenberg-Marquardt loop; returns final arrays and a :class:`SolveReport`."""
    start = time.perf_counter()
    ne, cost = backend.assemble(R, t, cp)
    if not np.isfinite(cost):
        raise DivergedNaN("initial cost is not finite")
    initial_cost = cost
    lam = config.lambda_init
    ptol, ftol = config.parameter_tolerance, config.function_tolerance
    trace: list[TraceRow] = []
    termination = "max_iter"

    for it in range(1, config.max_iterations + 1):
        try:
            xi = lm_step(ne, lam)
        except SingularSystem:
            lam *= config.lambda_up
            trace.append(TraceRow(it, cost, lam, 0.0, time.perf_counter() - start))
            continue
        step_norm = float(np.linalg.norm(xi))
        if step_norm <= ptol * (state_norm(R, t, cp) + ptol):
            trace.append(TraceRow(it, cost, lam, step_norm, time.perf_counter() - start))
            termination = "parameter_tol"
            break
        R_new, t_new, cp_new = apply_step(R, t, cp, xi)
        try:
            new_cost = backend.cost(R_new, t_new, cp_new)
        except DegeneratePlane:
            new_cost = np.inf
        else:
            if not np.isfinite(new_cost):
                raise DivergedNaN(f"cost became {new_cost} at iteration {it}")
        # rejected trials count too: a step that cannot move the cost means convergence
        converged = abs(cost - new_cost) <= ftol * (cost + 1e-20)
        if new_cost < cost:
            R, t, cp, cost = R_new, t_new, cp_new, new_cost
            lam /= config.lambda_down
        else:
            lam *= config.lambda_up
        trace.append(TraceRow(it, cost, lam, step_norm, time.perf_counter() - start))
        if converged:
            termination = "function_tol"
            break
        if cost == new_cost:
            ne, _ = backend.assemble(R, t, cp)

    report = SolveReport(
        method=config.method,
        iterations=len(trace),
        initial_cost=initial_cost,
        final_cost=cost,
        termination=termination,
        trace=trace,
        qr_time=getattr(backend, "qr_time", 0.0),
        init_time=getattr(backend, "init_time", 0.0),
        optimization_time=time.perf_counter() - start,
    )
    log.info("%s: %s after %d iterations, cost %.6g -> %.6g", config.method, termination,
             report.iterations, initial_cost, cost)
    return R, t, cp, report


def solve(graph: ProblemGraph, initial_state: ProblemState, config: LMConfig | None = None):
    """Refine all non-anchor poses and all planes; returns ``(final_state, report)``."""
    config = config or LMConfig()
    backend = make_backend(graph, config.method)
    R0, t0, cp0 = initial_state.arrays()
    R, t, cp, report = run_lm(backend, R0, t0, cp0, config)
    final = ProblemState.from_arrays(R, t, cp)
    final.poses[0] = initial_state.poses[0]
    return final, report
