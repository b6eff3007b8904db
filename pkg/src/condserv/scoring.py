"""Distances between the live observation and a demonstration's first frame."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

import numpy as np

from .demomodel import DemoSet, Frame
from .flow import FlowEstimator, FlowField, warp
from .registration import (DegenerateGeometry, PointCloudPair, Registration, RegistrationError,
                           register, unproject)

if TYPE_CHECKING:
    from .mlp import MlpModel

INVALID_WARP_PENALTY = math.sqrt(3.0)


class Strategy(str, enum.Enum):
    UNIFORM_RANDOM = "UniformRandom"
    POINT_QUALITY = "PointQuality"
    COLOR_QUALITY = "ColorQuality"
    REPROJECTION = "Reprojection"
    MLP = "Mlp"


class EmptyMask(ValueError):
    reason = "EmptyMask"


@dataclass(frozen=True)
class Unscorable:
    reason: str  # InsufficientCorrespondences | InsufficientInliers | EmptyMask

    def to_json(self) -> dict:
        return {"unscorable": self.reason}


Score = Union[float, Unscorable]


@dataclass(frozen=True)
class ScoreReport:
    demo_id: str
    d_pq: Score
    d_cq: Score
    d_rp: Score
    d_mlp: Score | None = None
    inlier_count: int = 0

    def distance(self, strategy: Strategy | str) -> Score:
        strategy = Strategy(strategy)
        return {
            Strategy.POINT_QUALITY: self.d_pq,
            Strategy.COLOR_QUALITY: self.d_cq,
            Strategy.REPROJECTION: self.d_rp,
            Strategy.MLP: self.d_mlp if self.d_mlp is not None else Unscorable("NoModel"),
        }[strategy]

    @property
    def features(self) -> list[float] | None:
        vals = [self.d_pq, self.d_cq, self.d_rp]
        if any(isinstance(v, Unscorable) for v in vals):
            return None
        return [float(v) for v in vals]

    def to_json(self) -> dict:
        enc = lambda v: v.to_json() if isinstance(v, Unscorable) else v  # noqa: E731
        return {"demo_id": self.demo_id, "d_pq": enc(self.d_pq), "d_cq": enc(self.d_cq),
                "d_rp": enc(self.d_rp), "d_mlp": enc(self.d_mlp), "inlier_count": self.inlier_count}


def _check_inliers(reg: Registration) -> np.ndarray:
    idx = np.asarray(reg.inliers)
    if len(idx) < 3:
        raise ValueError("need at least three inliers")
    return idx


def point_quality(reg: Registration, pair: PointCloudPair) -> float:
    """Mean 3D distance between transformed demo points and live points over the inliers."""
    idx = _check_inliers(reg)
    diff = reg.transform.apply(pair.demo_points[idx]) - pair.live_points[idx]
    return float(np.linalg.norm(diff, axis=1).mean())


def color_quality(reg: Registration, pair: PointCloudPair) -> float:
    """Mean RGB distance between corresponding points, same inlier set as point_quality."""
    idx = _check_inliers(reg)
    return float(np.linalg.norm(pair.demo_colors[idx] - pair.live_colors[idx], axis=1).mean())


def reprojection(demo: Frame, live: Frame, flow: FlowField) -> float:
    """Mean photometric error of the live image warped into the demo view,
    over every demo-mask pixel. Pixels without a valid warp cost sqrt(3)."""
    if not demo.mask.any():
        raise EmptyMask("demonstration frame has an empty mask")
    warped, valid = warp(live.rgb, flow)
    if not valid[demo.mask].any():
        # exact, so that demos with no usable warp tie and fall to the id order
        return INVALID_WARP_PENALTY
    err = np.linalg.norm(warped - demo.rgb, axis=2)
    err = np.where(valid, err, INVALID_WARP_PENALTY)
    return float(err[demo.mask].mean())


def mlp_distance(report: ScoreReport, model: MlpModel) -> Score:
    feats = report.features
    if feats is None:
        bad = next(v for v in (report.d_pq, report.d_cq, report.d_rp) if isinstance(v, Unscorable))
        return bad
    return 1.0 - model.predict(np.asarray(feats))


def score_demo(live: Frame, demo_frame: Frame, demo_id: str, estimator: FlowEstimator,
               model: MlpModel | None = None) -> ScoreReport:
    if not demo_frame.mask.any():
        u = Unscorable(EmptyMask.reason)
        return ScoreReport(demo_id, u, u, u, u if model is not None else None)
    flow = estimator.estimate(demo_frame, live)
    d_rp = reprojection(demo_frame, live, flow)
    try:
        pair = unproject(demo_frame, flow, live)
        reg = register(pair)
        d_pq, d_cq, n = point_quality(reg, pair), color_quality(reg, pair), len(reg.inliers)
    except DegenerateGeometry:
        d_pq = d_cq = Unscorable("InsufficientCorrespondences")
        n = 0
    except RegistrationError as exc:
        d_pq = d_cq = Unscorable(exc.reason)
        n = 0
    report = ScoreReport(demo_id, d_pq, d_cq, d_rp, None, n)
    if model is not None:
        report = ScoreReport(demo_id, d_pq, d_cq, d_rp, mlp_distance(report, model), n)
    return report


def score_all(live: Frame, demos: DemoSet, estimator: FlowEstimator,
              model: MlpModel | None = None) -> list[ScoreReport]:
    """One report per demonstration, scored on its first frame."""
    return [score_demo(live, d.first, d.id, estimator, model) for d in demos]
