"""Privileged-state demonstrator: one pick-and-insert demonstration per shape."""

from __future__ import annotations

import math

from ..demomodel import Demonstration, Gripper
from .config import ShapeKind, SimConfig
from .dynamics import demo_state, step, task_success
from .render import BOX, render
from .state import Action, SimState, wrap_angle

RELEASE_CLEARANCE = 0.005


class ScriptedPolicyError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def move_to(state: SimState, target, config: SimConfig, max_steps: int = 500) -> SimState:
    """Drive the tool to ``target`` (x, y, z, yaw) with clamped steps."""
    for _ in range(max_steps):
        tx, ty, tz, tt = state.tool
        wx, wy, wz = target[0] - tx, target[1] - ty, target[2] - tz
        dth = wrap_angle(target[3] - tt)
        if max(abs(wx), abs(wy), abs(wz), abs(dth)) < 1e-12:
            return state
        c, s = math.cos(tt), math.sin(tt)
        state = step(state, Action(c * wx + s * wy, -s * wx + c * wy, wz, dth, state.gripper), config)
    return state


def keyframes(config: SimConfig, kind: str) -> list[tuple[tuple[float, float, float, float], Gripper, bool]]:
    """Tool poses of one demonstration, with the gripper command issued at
    each and whether the piece is still on the table when it is captured."""
    kind_e = ShapeKind(kind)
    ox, oy, ot = config.demo_layout[kind]
    h = config.shape(kind).height
    hx, hy, ht = config.sorter.hole_pose(kind_e)
    period = 2 * math.pi / kind_e.symmetry
    # insertion yaw equivalent under the piece's symmetry, closest to the grasp yaw
    ti = ot + wrap_angle((ht - ot + period / 2) % period - period / 2)
    zh = config.home[2]
    z_grasp = h / 2
    z_release = config.sorter.height + RELEASE_CLEARANCE + h / 2
    home = tuple(float(v) for v in config.home)
    O, C = Gripper.OPEN, Gripper.CLOSED
    return [
        (home, O, True),
        ((ox, oy, zh, ot), O, True),
        ((ox, oy, z_grasp, ot), C, True),
        ((ox, oy, zh, ot), C, False),
        ((hx, hy, zh, ti), C, False),
        ((hx, hy, z_release, ti), O, False),
        (home, O, False),
    ]


def record_demo(config: SimConfig, kind: str) -> Demonstration:
    state = demo_state(config, kind)
    frames = []
    for pose, command, piece_on_table in keyframes(config, kind):
        state = move_to(state, pose, config)
        entities = (0,) if piece_on_table else (BOX,)
        f = render(state, config, entities)
        frames.append(f.__class__(rgb=f.rgb, depth=f.depth, mask=f.mask, intrinsics=f.intrinsics,
                                  tcp_pose=f.tcp_pose, gripper=command, state=state))
        if not f.mask.any():
            raise ScriptedPolicyError(kind, f"frame {len(frames) - 1} has an empty mask")
        if command != state.gripper:
            state = step(state, Action(gripper=command), config)
    if not task_success(state, 0):
        raise ScriptedPolicyError(kind, "scripted insertion failed")
    return Demonstration(id=kind, frames=tuple(frames))


def replay_open_loop(demo: Demonstration, state: SimState, config: SimConfig) -> SimState:
    """Re-execute the recorded tool poses and gripper commands without feedback."""
    for frame in demo.frames:
        state = move_to(state, frame.tcp_pose, config)
        if frame.gripper != state.gripper:
            state = step(state, Action(gripper=frame.gripper), config)
    return state


def record_all(config: SimConfig) -> list[Demonstration]:
    return [record_demo(config, s.kind.value) for s in config.shapes]
