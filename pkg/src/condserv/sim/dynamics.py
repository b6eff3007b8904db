"""Kinematic shape-sorting dynamics: reset, step, drop injection, success."""

from __future__ import annotations

import math

import numpy as np

from ..demomodel import Gripper
from .config import ShapeKind, SimConfig
from .state import Action, ObjectState, SimState, Status, wrap_angle


class PlacementError(RuntimeError):
    pass


def object_polygon(config: SimConfig, obj: ObjectState) -> np.ndarray:
    """World-frame footprint vertices of an object, counter-clockwise."""
    poly = config.shape(obj.kind).polygon
    c, s = math.cos(obj.theta), math.sin(obj.theta)
    return poly @ np.array([[c, s], [-s, c]]) + np.array([obj.x, obj.y])


def _sample_scatter(config: SimConfig, rng: np.random.Generator, shapes=None) -> list[ObjectState]:
    xmin, xmax, ymin, ymax = config.table_extent
    placed: list[tuple[float, float, float]] = []
    objects = []
    for shape in config.shapes if shapes is None else shapes:
        r = shape.radius
        if xmax - xmin <= 2 * r or ymax - ymin <= 2 * r:
            raise PlacementError(f"table too small for {shape.kind.value}")
        for _ in range(config.max_tries):
            x = rng.uniform(xmin + r, xmax - r)
            y = rng.uniform(ymin + r, ymax - r)
            theta = rng.uniform(-math.pi, math.pi)
            if config.sorter is not None:
                (bx, by), (sx, sy) = config.sorter.center, config.sorter.size
                if (abs(x - bx) < sx / 2 + r + config.clearance
                        and abs(y - by) < sy / 2 + r + config.clearance):
                    continue
            if any(math.hypot(x - px, y - py) < r + pr + config.clearance for px, py, pr in placed):
                continue
            placed.append((x, y, r))
            objects.append(ObjectState(shape.kind.value, x, y, theta))
            break
        else:
            raise PlacementError(f"could not place {shape.kind.value} after {config.max_tries} tries")
    return objects


def _sample_stacked(config: SimConfig, rng: np.random.Generator) -> list[ObjectState]:
    """All pieces in a single tower at a random free location."""
    widest = max(config.shapes, key=lambda sh: sh.radius)
    base = _sample_scatter(config, rng, [widest])[0]
    order = rng.permutation(len(config.shapes))
    objects: list[ObjectState | None] = [None] * len(config.shapes)
    z = 0.0
    for i in order:
        shape = config.shapes[i]
        objects[i] = ObjectState(shape.kind.value, base.x, base.y,
                                 wrap_angle(base.theta + rng.uniform(-0.2, 0.2)), z)
        z += shape.height
    return objects  # type: ignore[return-value]


def reset(config: SimConfig, seed: int | None = None) -> SimState:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    if config.layout == "stacked":
        objects = _sample_stacked(config, rng)
    else:
        objects = _sample_scatter(config, rng)
    return SimState(objects=tuple(objects), tool=tuple(float(v) for v in config.home))


def demo_state(config: SimConfig, kind: str) -> SimState:
    """Recording scene for one demonstration: only that piece, at its nominal pose."""
    x, y, theta = config.demo_layout[kind]
    return SimState(objects=(ObjectState(kind, float(x), float(y), float(theta)),),
                    tool=tuple(float(v) for v in config.home))


def _tool_frame_offset(tool, obj: ObjectState) -> tuple[float, float, float, float]:
    tx, ty, tz, tt = tool
    c, s = math.cos(tt), math.sin(tt)
    dx, dy = obj.x - tx, obj.y - ty
    return (c * dx + s * dy, -s * dx + c * dy, obj.z - tz, wrap_angle(obj.theta - tt))


def _follow(tool, offset) -> tuple[float, float, float, float]:
    tx, ty, tz, tt = tool
    ox, oy, oz, ot = offset
    c, s = math.cos(tt), math.sin(tt)
    return tx + c * ox - s * oy, ty + s * ox + c * oy, tz + oz, wrap_angle(tt + ot)


def _angle_within(a: float, b: float, period: float, tol: float) -> bool:
    d = (a - b) % period
    return min(d, period - d) <= tol


def _release(state: SimState, config: SimConfig) -> SimState:
    """Open the gripper; a held piece is inserted or falls back onto the table."""
    objects = list(state.objects)
    if state.held is not None:
        obj = objects[state.held]
        kind = ShapeKind(obj.kind)
        shape = config.shape(kind)
        inserted = False
        sorter = config.sorter
        if sorter is not None:
            hx, hy, ht = sorter.hole_pose(kind)
            inserted = (math.hypot(obj.x - hx, obj.y - hy) <= config.insert_radius
                        and _angle_within(obj.theta, ht, 2 * math.pi / kind.symmetry, config.insert_angle)
                        and obj.z <= sorter.height + config.release_height)
        if inserted:
            objects[state.held] = obj.moved(z=sorter.height - shape.height, status=Status.INSERTED)
        else:
            rest = sorter.height if sorter is not None and sorter.contains(obj.x, obj.y) else 0.0
            objects[state.held] = obj.moved(z=rest, status=Status.ON_TABLE)
    return state.with_(objects=tuple(objects), gripper=Gripper.OPEN, held=None, grasp_offset=None)


def _grasp(state: SimState, config: SimConfig) -> SimState:
    tx, ty, tz, _ = state.tool
    best, best_d = None, math.inf
    for i, o in enumerate(state.objects):
        if o.status != Status.ON_TABLE:
            continue
        h = config.shape(o.kind).height
        d = math.sqrt((o.x - tx) ** 2 + (o.y - ty) ** 2 + (o.z + h / 2 - tz) ** 2)
        if d <= config.grasp_radius and d < best_d:
            best, best_d = i, d
    if best is None:
        return state.with_(gripper=Gripper.CLOSED)
    objects = list(state.objects)
    objects[best] = objects[best].moved(status=Status.HELD)
    return state.with_(objects=tuple(objects), gripper=Gripper.CLOSED, held=best,
                       grasp_offset=_tool_frame_offset(state.tool, objects[best]))


def step(state: SimState, action: Action, config: SimConfig) -> SimState:
    a = action.clamped(config.limits.xyz, config.limits.theta)
    tx, ty, tz, tt = state.tool
    c, s = math.cos(tt), math.sin(tt)
    tool = (tx + c * a.dx - s * a.dy, ty + s * a.dx + c * a.dy, max(0.0, tz + a.dz),
            wrap_angle(tt + a.dtheta))
    objects = list(state.objects)
    if state.held is not None:
        x, y, z, th = _follow(tool, state.grasp_offset)
        objects[state.held] = objects[state.held].moved(x=x, y=y, z=z, theta=th)
    new = state.with_(tool=tool, objects=tuple(objects))
    if a.gripper == Gripper.CLOSED and state.gripper == Gripper.OPEN:
        new = _grasp(new, config)
    elif a.gripper == Gripper.OPEN and state.gripper == Gripper.CLOSED:
        new = _release(new, config)
    return new


def inject_drop(state: SimState, rng: np.random.Generator, p: float, config: SimConfig) -> SimState:
    """With probability ``p``, force a held piece out of the gripper."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be a probability")
    if state.held is None:
        return state
    if rng.random() < p:
        return _release(state, config)
    return state


def task_success(state: SimState, target: int | str = "all") -> bool:
    if target == "all":
        return all(o.status == Status.INSERTED for o in state.objects)
    idx = target if isinstance(target, int) else state.object_index(target)
    return state.objects[idx].status == Status.INSERTED
