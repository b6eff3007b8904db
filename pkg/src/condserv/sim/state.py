"""Value types for the simulator: object/tool state and actions."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from ..demomodel import Gripper


class Status(str, enum.Enum):
    ON_TABLE = "on_table"
    HELD = "held"
    INSERTED = "inserted"


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class ObjectState:
    kind: str
    x: float
    y: float
    theta: float
    z: float = 0.0  # height of the footprint's base above the table
    status: Status = Status.ON_TABLE

    def moved(self, **kw) -> ObjectState:
        return replace(self, **kw)


@dataclass(frozen=True)
class SimState:
    objects: tuple[ObjectState, ...]
    tool: tuple[float, float, float, float]
    gripper: Gripper = Gripper.OPEN
    held: int | None = None
    # object pose relative to the tool while held: (x, y, z, theta) in the tool frame
    grasp_offset: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        held = [i for i, o in enumerate(self.objects) if o.status == Status.HELD]
        if len(held) > 1:
            raise ValueError("at most one object may be held")
        if held and (self.held != held[0] or self.gripper != Gripper.CLOSED):
            raise ValueError("a held object requires a closed gripper")

    def object_index(self, kind: str) -> int:
        for i, o in enumerate(self.objects):
            if o.kind == kind:
                return i
        raise KeyError(kind)

    def with_(self, **kw) -> SimState:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "objects": [{"kind": o.kind, "x": o.x, "y": o.y, "theta": o.theta, "z": o.z,
                         "status": o.status.value} for o in self.objects],
            "tool": list(self.tool),
            "gripper": self.gripper.value,
            "held": self.held,
            "grasp_offset": None if self.grasp_offset is None else list(self.grasp_offset),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SimState:
        objs = tuple(ObjectState(o["kind"], o["x"], o["y"], o["theta"], o["z"], Status(o["status"]))
                     for o in d["objects"])
        off = d.get("grasp_offset")
        return cls(objects=objs, tool=tuple(d["tool"]), gripper=Gripper(d["gripper"]),
                   held=d.get("held"), grasp_offset=None if off is None else tuple(off))


@dataclass(frozen=True)
class Action:
    """Tool motion in the end-effector frame plus a binary gripper command."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dtheta: float = 0.0
    gripper: Gripper = Gripper.OPEN

    def __post_init__(self):
        for v in (self.dx, self.dy, self.dz, self.dtheta):
            if not math.isfinite(v):
                raise ValueError("action components must be finite")
        object.__setattr__(self, "gripper", Gripper(self.gripper))

    def clamped(self, xyz: float = 0.02, theta: float = 0.1) -> Action:
        c = lambda v, m: max(-m, min(m, float(v)))  # noqa: E731
        return Action(c(self.dx, xyz), c(self.dy, xyz), c(self.dz, xyz), c(self.dtheta, theta), self.gripper)

    def as_list(self) -> list:
        return [self.dx, self.dy, self.dz, self.dtheta, self.gripper.value]
