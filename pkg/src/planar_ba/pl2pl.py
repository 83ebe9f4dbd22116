"""Plane-to-plane baseline: CP-vector differences between fitted and mapped planes.

Each observation is summarized once by a plane fitted to its points in the
sensor frame. The residual compares the closest-point vector of that local
plane with the estimated global plane. Two comparison frames are offered:

``frame="global"`` (default)
    ``r = CP(T^-T pi_local) - cp_g``: the local plane is mapped into the
    global frame with the pose and compared to the global CP vector. This
    residual depends on where the global origin sits, which is the property
    the point-to-plane cost does not have.

``frame="sensor"``
    ``r = CP(pi_local) - CP(T^T pi_g)``: the global plane is mapped into the
    sensor frame. This form is unchanged by a rigid re-anchoring of the whole
    map (but depends on the sensor origin instead).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, DegeneratePlane
from .geometry import CP_EPS, PlaneCP, PlaneHesse, Pose, fit_plane
from .problem import ProblemGraph, ProblemState
from .reduction import normal_offset_jacobians
from .solver import Accumulator, LMConfig, run_lm

log = logging.getLogger(__name__)

FRAMES = ("global", "sensor")


@dataclass(frozen=True, eq=False)
class PlaneObservationSummary:
    pose_index: int
    plane_index: int
    local_plane: PlaneHesse
    weight: float = 1.0


def summarize(graph: ProblemGraph) -> list[PlaneObservationSummary]:
    """Fit a local plane to every observation; degenerate observations are skipped."""
    out = []
    for ob in graph.observations:
        try:
            plane = fit_plane(ob.points)
        except DegenerateFit as exc:
            warnings.warn(f"skipping observation (pose {ob.pose_index}, plane {ob.plane_index}): {exc}")
            continue
        out.append(PlaneObservationSummary(ob.pose_index, ob.plane_index, plane))
    return out


def _hat_batch(v):
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def residuals_global(R, t, cp, n_loc, d_loc, with_jacobian=True):
    """Global-frame residuals for stacked observations (R, t, cp indexed per observation)."""
    n_g = np.einsum("nij,nj->ni", R, n_loc)
    d_g = d_loc - np.einsum("ni,ni->n", n_g, t)
    res = d_g[:, None] * n_g - cp
    if not with_jacobian:
        return res
    dn_dth = -np.matmul(R, _hat_batch(n_loc))
    dd_dth = -np.einsum("ni,nij->nj", t, dn_dth)
    jp = np.empty((len(R), 3, 6))
    jp[:, :, :3] = n_g[:, :, None] * dd_dth[:, None, :] + d_g[:, None, None] * dn_dth
    jp[:, :, 3:] = -n_g[:, :, None] * n_g[:, None, :]
    jw = np.broadcast_to(-np.eye(3), (len(R), 3, 3)).copy()
    return res, jp, jw


def residuals_sensor(R, t, cp, n_loc, d_loc, with_jacobian=True, eps=CP_EPS):
    """Sensor-frame residuals; observations whose mapped plane hits the sensor origin are masked."""
    n_gl, d_gl, dn, dd = normal_offset_jacobians(cp)
    n_s = np.einsum("nji,nj->ni", R, n_gl)
    d_s = np.einsum("ni,ni->n", n_gl, t) + d_gl
    res = (d_loc[:, None] * n_loc) - d_s[:, None] * n_s
    valid = np.abs(d_s) >= eps
    res[~valid] = 0.0
    if not with_jacobian:
        return res, valid
    dns_dth = _hat_batch(n_s)
    dns_dcp = np.matmul(R.transpose(0, 2, 1), dn)
    dds_dcp = np.einsum("ni,nij->nj", t, dn) + dd
    jp = np.empty((len(R), 3, 6))
    jp[:, :, :3] = -d_s[:, None, None] * dns_dth
    jp[:, :, 3:] = -n_s[:, :, None] * n_gl[:, None, :]
    jw = -(n_s[:, :, None] * dds_dcp[:, None, :] + d_s[:, None, None] * dns_dcp)
    jp[~valid] = 0.0
    jw[~valid] = 0.0
    return res, jp, jw, valid


class PlaneToPlaneBackend:
    """Residual model for :func:`planar_ba.solver.run_lm` over plane summaries."""

    def __init__(self, graph: ProblemGraph, frame: str = "global", summaries=None):
        if frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}")
        t0 = time.perf_counter()
        self.frame = frame
        self.n_poses = graph.n_poses
        self.n_planes = graph.n_planes
        summaries = summarize(graph) if summaries is None else summaries
        self.pose_idx = np.array([s.pose_index for s in summaries], dtype=np.intp)
        self.plane_idx = np.array([s.plane_index for s in summaries], dtype=np.intp)
        self.n_loc = np.array([s.local_plane.normal for s in summaries]).reshape(-1, 3)
        self.d_loc = np.array([s.local_plane.offset for s in summaries])
        self.sqrt_w = np.sqrt(np.array([s.weight for s in summaries]))
        self.accumulate = Accumulator(self.pose_idx, self.plane_idx, self.n_poses, self.n_planes)
        self.qr_time = 0.0
        self.init_time = time.perf_counter() - t0
        self._warned = False

    def _eval(self, R, t, cp, with_jacobian):
        i, j = self.pose_idx, self.plane_idx
        args = (R[i], t[i], cp[j], self.n_loc, self.d_loc)
        if self.frame == "global":
            out = residuals_global(*args, with_jacobian=with_jacobian)
            if not with_jacobian:
                out = (out,)
        else:
            out = residuals_sensor(*args, with_jacobian=with_jacobian)
            valid = out[-1]
            if not valid.all() and not self._warned:
                log.warning("%d plane-to-plane residuals skipped: mapped plane passes through the sensor",
                            int((~valid).sum()))
                self._warned = True
            out = out[:-1]
        w = self.sqrt_w
        scaled = [out[0] * w[:, None]] + [blk * w[:, None, None] for blk in out[1:]]
        return scaled

    def cost(self, R, t, cp) -> float:
        (res,) = self._eval(R, t, cp, with_jacobian=False)
        return float(np.einsum("nr,nr->", res, res))

    def assemble(self, R, t, cp):
        res, jp, jw = self._eval(R, t, cp, with_jacobian=True)
        return self.accumulate(jp, jw, res)


def pl2pl_residual(pose: Pose, global_plane_cp: PlaneCP, summary: PlaneObservationSummary,
                   frame: str = "global") -> np.ndarray:
    args = (pose.rotation[None], pose.translation[None], global_plane_cp.cp[None],
            summary.local_plane.normal[None], np.array([summary.local_plane.offset]))
    if frame == "global":
        return residuals_global(*args, with_jacobian=False)[0]
    res, valid = residuals_sensor(*args, with_jacobian=False)
    if not valid[0]:
        raise DegeneratePlane("mapped plane passes through the sensor origin")
    return res[0]


def pl2pl_cost(graph: ProblemGraph, state: ProblemState, frame: str = "global", summaries=None) -> float:
    return PlaneToPlaneBackend(graph, frame, summaries).cost(*state.arrays())


def solve_pl2pl(graph: ProblemGraph, initial_state: ProblemState, config: LMConfig | None = None,
                frame: str = "global"):
    """Plane-to-plane counterpart of :func:`planar_ba.solver.solve`."""
    config = config or LMConfig(method="pl2pl")
    if config.method != "pl2pl":
        config = LMConfig(**{**config.__dict__, "method": "pl2pl"})
    backend = PlaneToPlaneBackend(graph, frame)
    R0, t0, cp0 = initial_state.arrays()
    R, t, cp, report = run_lm(backend, R0, t0, cp0, config)
    final = ProblemState.from_arrays(R, t, cp)
    final.poses[0] = initial_state.poses[0]
    return final, report
