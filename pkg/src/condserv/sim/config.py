"""Scenario configuration for the shape-sorting simulator."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ..demomodel import CameraIntrinsics


class ShapeKind(str, enum.Enum):
    SQUARE = "square"
    TRIANGLE = "triangle"
    TRAPEZOID = "trapezoid"

    @property
    def symmetry(self) -> int:
        """Order of the footprint's rotational symmetry."""
        return {"square": 4, "triangle": 3, "trapezoid": 1}[self.value]


Color = tuple[float, float, float]
Polygon = tuple[tuple[float, float], ...]


def _polygon_area_centroid(poly: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = poly[:, 0], poly[:, 1]
    xs, ys = np.roll(x, -1), np.roll(y, -1)
    cross = x * ys - xs * y
    area = cross.sum() / 2.0
    cx = ((x + xs) * cross).sum() / (6.0 * area)
    cy = ((y + ys) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def _check_convex_ccw(poly: np.ndarray) -> None:
    if len(poly) < 3:
        raise ValueError("polygon needs at least three vertices")
    area, _ = _polygon_area_centroid(poly)
    if area <= 1e-12:
        raise ValueError("polygon must be counter-clockwise and non-degenerate")
    e = np.roll(poly, -1, axis=0) - poly
    turn = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(turn <= 0):
        raise ValueError("polygon must be strictly convex")


@dataclass(frozen=True)
class ShapeSpec:
    kind: ShapeKind
    color: Color
    footprint: Polygon
    height: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ShapeKind(self.kind))
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))
        poly = np.asarray(self.footprint, dtype=float)
        _check_convex_ccw(poly)
        object.__setattr__(self, "footprint", tuple((float(a), float(b)) for a, b in poly))
        if self.height <= 0:
            raise ValueError("shape height must be positive")

    @property
    def polygon(self) -> np.ndarray:
        return np.asarray(self.footprint)

    @property
    def radius(self) -> float:
        return float(np.max(np.hypot(*self.polygon.T)))


@dataclass(frozen=True)
class HoleSpec:
    kind: ShapeKind
    offset: tuple[float, float]
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShapeKind(self.kind))
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))


@dataclass(frozen=True)
class SorterSpec:
    center: tuple[float, float]
    size: tuple[float, float]
    height: float
    color: Color
    hole_color: Color
    holes: tuple[HoleSpec, ...]
    hole_scale: float = 1.15

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "color", tuple(float(v) for v in self.color))
        object.__setattr__(self, "hole_color", tuple(float(v) for v in self.hole_color))
        object.__setattr__(self, "holes", tuple(h if isinstance(h, HoleSpec) else HoleSpec(**h)
                                                for h in self.holes))

    @property
    def polygon(self) -> np.ndarray:
        hx, hy = self.size[0] / 2, self.size[1] / 2
        cx, cy = self.center
        return np.array([[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]])

    def hole(self, kind: ShapeKind) -> HoleSpec:
        for h in self.holes:
            if h.kind == kind:
                return h
        raise KeyError(kind)

    def hole_pose(self, kind: ShapeKind) -> tuple[float, float, float]:
        h = self.hole(kind)
        return self.center[0] + h.offset[0], self.center[1] + h.offset[1], h.theta

    def contains(self, x: float, y: float) -> bool:
        return (abs(x - self.center[0]) <= self.size[0] / 2
                and abs(y - self.center[1]) <= self.size[1] / 2)


@dataclass(frozen=True)
class StepLimits:
    xyz: float = 0.02
    theta: float = 0.1


@dataclass(frozen=True)
class SimConfig:
    name: str = "custom"
    height: int = 96
    width: int = 96
    intrinsics: CameraIntrinsics = CameraIntrinsics(48.0, 48.0, 47.5, 47.5)
    table_extent: tuple[float, float, float, float] = (-0.37, 0.37, -0.37, 0.37)
    shapes: tuple[ShapeSpec, ...] = ()
    sorter: SorterSpec | None = None
    grasp_radius: float = 0.015
    insert_radius: float = 0.008
    insert_angle: float = 0.15
    release_height: float = 0.03
    camera_offset: float = 0.25
    home: tuple[float, float, float, float] = (0.0, 0.0, 0.08, 0.0)
    limits: StepLimits = StepLimits()
    layout: str = "scatter"
    clearance: float = 0.01
    max_tries: int = 1000
    demo_layout: dict = field(default_factory=dict)
    show_gripper: bool = True
    table_color: Color = (0.62, 0.6, 0.56)
    finger_color: Color = (0.3, 0.3, 0.32)
    side_shade: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.grasp_radius <= 0 or self.insert_radius <= 0:
            raise ValueError("grasp and insertion radii must be positive")
        kinds = [s.kind for s in self.shapes]
        if len(set(kinds)) != len(kinds):
            raise ValueError("one shape per kind")
        if self.sorter is not None:
            holes = sorted(h.kind.value for h in self.sorter.holes)
            if self.shapes and sorted(k.value for k in kinds) != holes:
                raise ValueError("holes and shapes must correspond one-to-one by kind")

    def shape(self, kind: ShapeKind | str) -> ShapeSpec:
        kind = ShapeKind(kind)
        for s in self.shapes:
            if s.kind == kind:
                return s
        raise KeyError(kind)

    def with_(self, **changes) -> SimConfig:
        return replace(self, **changes)

    # -- json ---------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["shapes"] = [{"kind": s.kind.value, "color": list(s.color),
                        "footprint": [list(p) for p in s.footprint], "height": s.height}
                       for s in self.shapes]
        if self.sorter is not None:
            d["sorter"]["holes"] = [{"kind": h.kind.value, "offset": list(h.offset), "theta": h.theta}
                                    for h in self.sorter.holes]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        if "intrinsics" in d:
            d["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
        if "shapes" in d:
            d["shapes"] = tuple(ShapeSpec(**s) for s in d["shapes"])
        if d.get("sorter") is not None:
            d["sorter"] = SorterSpec(**d["sorter"])
        if "limits" in d:
            d["limits"] = StepLimits(**d["limits"])
        for key in ("table_extent", "home", "table_color", "finger_color"):
            if key in d:
                d[key] = tuple(d[key])
        if "demo_layout" in d:
            d["demo_layout"] = {k: tuple(v) for k, v in d["demo_layout"].items()}
        return cls(**d)


def load_config(path: str | Path) -> SimConfig:
    return SimConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: SimConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1))


def preset(name: str) -> SimConfig:
    """Load a shipped scenario, e.g. ``preset("standard3")``."""
    text = resources.files("condserv.presets").joinpath(f"{name}.json").read_text()
    return SimConfig.from_dict(json.loads(text))


def resolve_scenario(spec: str | Path) -> SimConfig:
    """Accept either a preset name or a path to a scenario file."""
    p = Path(spec)
    if p.suffix == ".json" and p.is_file():
        return load_config(p)
    return preset(p.stem if p.suffix == ".json" else str(spec))
