"""Deterministic kinematic shape-sorting simulator with an eye-in-hand camera."""

from .config import (HoleSpec, ShapeKind, ShapeSpec, SimConfig, SorterSpec, StepLimits,
                     load_config, preset, resolve_scenario, save_config)
from .dynamics import PlacementError, demo_state, inject_drop, object_polygon, reset, step, task_success
from .render import BOX, FINGER, TABLE, RenderBuffers, camera_for, render, render_buffers
from .scripted import ScriptedPolicyError, record_all, record_demo, replay_open_loop
from .state import Action, ObjectState, SimState, Status, wrap_angle

__all__ = [
    "Action", "BOX", "FINGER", "HoleSpec", "ObjectState", "PlacementError", "RenderBuffers",
    "ScriptedPolicyError", "ShapeKind", "ShapeSpec", "SimConfig", "SimState", "SorterSpec",
    "Status", "StepLimits", "TABLE", "camera_for", "demo_state", "inject_drop", "load_config",
    "object_polygon", "preset", "record_all", "record_demo", "render", "render_buffers",
    "replay_open_loop", "reset", "resolve_scenario", "save_config", "step", "task_success",
    "wrap_angle",
]
