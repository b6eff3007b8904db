"""Rigid registration of demo and live point clouds built from flow correspondences.

Convention: the estimated transform maps demo points onto live points,
``R @ p_demo + t ~= p_live``, both expressed in their own camera frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .demomodel import Frame, Gripper
from .flow import FlowField, bilinear_sample
from .sim.state import Action


class RegistrationError(Exception):
    reason = "RegistrationError"


class InsufficientCorrespondences(RegistrationError):
    reason = "InsufficientCorrespondences"


class InsufficientInliers(RegistrationError):
    reason = "InsufficientInliers"


class DegenerateGeometry(RegistrationError):
    reason = "DegenerateGeometry"


@dataclass(frozen=True, eq=False)
class PointCloudPair:
    demo_points: np.ndarray
    live_points: np.ndarray
    demo_colors: np.ndarray
    live_colors: np.ndarray

    def __post_init__(self):
        n = len(self.demo_points)
        for a in (self.live_points, self.demo_colors, self.live_colors):
            if len(a) != n:
                raise ValueError("point and color arrays must have equal length")
        if not (np.all(np.isfinite(self.demo_points)) and np.all(np.isfinite(self.live_points))):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.demo_points)

    def subset(self, idx) -> PointCloudPair:
        return PointCloudPair(self.demo_points[idx], self.live_points[idx],
                              self.demo_colors[idx], self.live_colors[idx])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    @property
    def yaw(self) -> float:
        """Rotation about the camera z axis."""
        return math.atan2(self.R[1, 0], self.R[0, 0])

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class Registration:
    transform: RigidTransform
    inliers: np.ndarray  # indices into the correspondence list
    mean_residual: float


# -- unprojection ------------------------------------------------------------

def unproject(demo: Frame, flow: FlowField, live: Frame) -> PointCloudPair:
    """3D point pairs for masked, flow-valid pixels with depth in both views."""
    h, w = demo.shape
    if flow.shape != (h, w) or live.shape != (h, w):
        raise ValueError("frame and flow sizes differ")
    sel = demo.mask & flow.valid & (demo.depth > 0)
    ys, xs = np.nonzero(sel)
    xl = xs + flow.u[ys, xs]
    yl = ys + flow.v[ys, xs]
    xn = np.floor(xl + 0.5).astype(int)
    yn = np.floor(yl + 0.5).astype(int)
    inb = (xn >= 0) & (xn < w) & (yn >= 0) & (yn < h)
    ys, xs, xl, yl, xn, yn = ys[inb], xs[inb], xl[inb], yl[inb], xn[inb], yn[inb]
    dl = live.depth[yn, xn].astype(float)
    keep = dl > 0
    ys, xs, xl, yl, xn, yn, dl = ys[keep], xs[keep], xl[keep], yl[keep], xn[keep], yn[keep], dl[keep]
    if len(ys) < 3:
        raise InsufficientCorrespondences(f"{len(ys)} correspondences")
    dd = demo.depth[ys, xs].astype(float)
    kd, kl = demo.intrinsics, live.intrinsics
    pd = np.column_stack([(xs - kd.cx) / kd.fx * dd, (ys - kd.cy) / kd.fy * dd, dd])
    # live depth comes from the nearest pixel (no blending across depth edges),
    # the ray from the sub-pixel flow target
    pl = np.column_stack([(xl - kl.cx) / kl.fx * dl, (yl - kl.cy) / kl.fy * dl, dl])
    cl, _ = bilinear_sample(live.rgb, xl, yl)
    return PointCloudPair(pd, pl, demo.rgb[ys, xs], cl)


# -- rigid fit -----------------------------------------------------------------

def kabsch(pair: PointCloudPair, rank_tol: float = 1e-10) -> RigidTransform:
    """Least-squares rigid transform with R @ p_demo + t ~= p_live."""
    if len(pair) < 3:
        raise InsufficientCorrespondences(f"{len(pair)} points")
    pd, pl = pair.demo_points, pair.live_points
    cd, cl = pd.mean(axis=0), pl.mean(axis=0)
    hmat = (pd - cd).T @ (pl - cl)
    u, s, vt = np.linalg.svd(hmat)
    if s[0] <= 0 or s[1] <= rank_tol * s[0]:
        raise DegenerateGeometry("cross-covariance has rank < 2")
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) >= 0 else -1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cl - r @ cd)


def residuals(transform: RigidTransform, pair: PointCloudPair) -> np.ndarray:
    return np.linalg.norm(transform.apply(pair.demo_points) - pair.live_points, axis=1)


def register(pair: PointCloudPair, outlier_mm: float = 5.0) -> Registration:
    """Fit, drop correspondences further than ``outlier_mm`` apart, refit once."""
    thr = outlier_mm / 1000.0
    first = kabsch(pair)
    keep = np.flatnonzero(residuals(first, pair) <= thr)
    if len(keep) < 3:
        raise InsufficientInliers(f"{len(keep)} inliers after initial fit")
    refit = kabsch(pair.subset(keep))
    res = residuals(refit, pair)
    inliers = np.flatnonzero(res <= thr)
    if len(inliers) < 3:
        raise InsufficientInliers(f"{len(inliers)} inliers after refit")
    return Registration(refit, inliers, float(res[inliers].mean()))


# camera axes expressed in the tool frame: x_cam = -x_tool, y_cam = y_tool, z_cam = -z_tool
CAMERA_TO_TOOL = np.diag([-1.0, 1.0, -1.0])


def transform_to_action(reg: Registration, gripper: Gripper, xyz_limit: float = 0.02,
                        theta_limit: float = 0.1) -> Action:
    """Tool motion that brings the live view onto the demo view.

    Aligning requires moving the camera to ``t`` and turning it by ``R``
    (camera frame). Mapped into the tool frame this gives dx = -t_x,
    dy = t_y, dz = -t_z; a turn about the downward camera axis is the
    negative turn about the tool's upward axis, so dtheta = -yaw(R).
    """
    move = CAMERA_TO_TOOL @ reg.transform.t
    return Action(float(move[0]), float(move[1]), float(move[2]), -reg.transform.yaw,
                  gripper).clamped(xyz_limit, theta_limit)
