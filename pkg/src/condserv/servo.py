"""Frame-by-frame servoing along a demonstration, and the outer selection loop.

The inner loop aligns the live camera with one demonstration frame at a
time and steps to the next frame once the residual motion is small. The
outer loop picks which demonstration to follow from the live view, follows
it to a terminal status, and picks again until every subtask is done.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .demomodel import DemoSet, Demonstration, Frame, Gripper
from .flow import FlowEstimator, get_estimator
from .mlp import MlpModel
from .registration import RegistrationError, register, transform_to_action, unproject
from .scoring import ScoreReport, Strategy, Unscorable, mlp_distance, score_demo
from .sim.config import SimConfig
from .sim.dynamics import inject_drop, step, task_success
from .sim.render import render
from .sim.state import Action, SimState


class Outcome(str, enum.Enum):
    RUNNING = "Running"
    DEMO_COMPLETE = "DemoComplete"
    TIMEOUT = "Timeout"
    REGISTRATION_LOST = "RegistrationLost"
    DROPPED = "Dropped"  # segment cut short by an injected drop under Reselect


class Recovery(str, enum.Enum):
    RESELECT = "Reselect"
    RETRACK = "Retrack"


@dataclass(frozen=True)
class ServoConfig:
    eps_pos: float = 0.003
    eps_rot: float = 0.05
    max_frame_steps: int = 50
    max_demo_steps: int = 600
    max_total_steps: int = 2500
    lost_after: int = 5
    outlier_mm: float = 5.0
    estimator: str = "oracle"
    strategy: Strategy = Strategy.REPROJECTION
    drop_step: int = 6  # held steps after a grasp at which the drop draw happens

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.eps_pos <= 0 or self.eps_rot <= 0:
            raise ValueError("alignment thresholds must be positive")
        if min(self.max_frame_steps, self.max_demo_steps, self.max_total_steps, self.lost_after) < 1:
            raise ValueError("step budgets must be >= 1")


@dataclass(frozen=True)
class ServoStatus:
    demo_id: str
    frame_index: int = 0
    steps: int = 0
    frame_steps: int = 0
    failures: int = 0
    residual: float | None = None
    outcome: Outcome = Outcome.RUNNING

    @property
    def running(self) -> bool:
        return self.outcome == Outcome.RUNNING

    def key(self) -> tuple:
        return (self.demo_id, self.frame_index, self.steps, self.frame_steps, self.failures)


@dataclass(frozen=True)
class _Alignment:
    """What one registration says about a live view relative to a demo frame."""

    t: tuple[float, float, float] | None
    yaw: float = 0.0
    residual: float | None = None
    action: Action | None = None
    reason: str | None = None


def _align(live: Frame, demo_frame: Frame, estimator: FlowEstimator, config: ServoConfig,
           limits) -> _Alignment:
    flow = estimator.estimate(demo_frame, live)
    try:
        reg = register(unproject(demo_frame, flow, live), config.outlier_mm)
    except RegistrationError as exc:
        return _Alignment(None, reason=exc.reason)
    act = transform_to_action(reg, Gripper.OPEN, limits.xyz, limits.theta)
    return _Alignment(tuple(float(v) for v in reg.transform.t), reg.transform.yaw,
                      reg.mean_residual, act)


def _advance(status: ServoStatus, demo: Demonstration, align: _Alignment, held_gripper: Gripper,
             config: ServoConfig) -> tuple[Action, ServoStatus]:
    steps, frame_steps = status.steps + 1, status.frame_steps + 1
    if align.t is None:
        action = Action(gripper=held_gripper)
        failures = status.failures + 1
        outcome = Outcome.REGISTRATION_LOST if failures >= config.lost_after else Outcome.RUNNING
        new = replace(status, steps=steps, frame_steps=frame_steps, failures=failures, outcome=outcome)
    else:
        frame = demo.frames[status.frame_index]
        aligned = math.hypot(*align.t) <= config.eps_pos and abs(align.yaw) <= config.eps_rot
        action = replace(align.action, gripper=frame.gripper if aligned else held_gripper)
        index, outcome = status.frame_index, Outcome.RUNNING
        if aligned:
            frame_steps = 0
            if index + 1 >= len(demo):
                outcome = Outcome.DEMO_COMPLETE
            else:
                index += 1
        new = replace(status, frame_index=index, steps=steps, frame_steps=frame_steps, failures=0,
                      residual=align.residual, outcome=outcome)
    if new.outcome == Outcome.RUNNING and (new.frame_steps >= config.max_frame_steps
                                           or new.steps >= config.max_demo_steps):
        new = replace(new, outcome=Outcome.TIMEOUT)
    return action, new


def servo_step(live: Frame, demo: Demonstration, status: ServoStatus, estimator: FlowEstimator,
               config: ServoConfig, limits=None) -> tuple[Action, ServoStatus]:
    """One control step toward ``demo.frames[status.frame_index]``.

    The commanded gripper state changes only on the step where the frame is
    reached; until then the live gripper state is held.
    """
    if not status.running:
        raise ValueError(f"servo_step needs a running status, got {status.outcome.value}")
    if limits is None:
        from .sim.config import StepLimits
        limits = StepLimits()
    align = _align(live, demo.frames[status.frame_index], estimator, config, limits)
    return _advance(status, demo, align, live.gripper, config)


# -- selection -----------------------------------------------------------------

def select_demo(reports: list[ScoreReport], strategy: Strategy | str,
                rng: np.random.Generator) -> str:
    """Argmin over scorable demos, ties by id; uniform over all when nothing scores.

    ``reports`` may be empty only for UniformRandom, where ids are drawn from
    the same list; pass one report per candidate.
    """
    strategy = Strategy(strategy)
    if not reports:
        raise ValueError("no candidate demonstrations")
    ids = sorted(r.demo_id for r in reports)
    if strategy == Strategy.UNIFORM_RANDOM:
        return ids[int(rng.integers(len(ids)))]
    scored = [(float(r.distance(strategy)), r.demo_id) for r in reports
              if not isinstance(r.distance(strategy), Unscorable)]
    if not scored:
        return ids[int(rng.integers(len(ids)))]
    return min(scored)[1]


def score_candidates(live: Frame, demos: DemoSet, candidates, estimator: FlowEstimator,
                     model: MlpModel | None = None) -> list[ScoreReport]:
    return [score_demo(live, demos[c].first, c, estimator, model) for c in sorted(candidates)]


# -- episodes -------------------------------------------------------------------

class EpisodeCache:
    """Memo for the expensive parts of an episode, shareable across strategies
    that start from the same scene. Keys include the full simulator state."""

    def __init__(self):
        self.scores: dict = {}
        self.aligns: dict = {}

    def score(self, state: SimState, demo_id: str, compute):
        key = (state, demo_id)
        if key not in self.scores:
            self.scores[key] = compute()
        return self.scores[key]

    def align(self, state: SimState, demo_id: str, index: int, compute):
        key = (state, demo_id, index)
        if key not in self.aligns:
            self.aligns[key] = compute()
        return self.aligns[key]


def _num(x):
    return None if x is None else float(x)


@dataclass
class EpisodeTrace:
    events: list[dict] = field(default_factory=list)
    success: bool = False
    first_success: bool = False
    steps: int = 0

    def log(self, **event) -> None:
        self.events.append(event)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str) -> EpisodeTrace:
        events = [json.loads(line) for line in text.splitlines() if line.strip()]
        end = next((e for e in reversed(events) if e["event"] == "end"), None)
        if end is None:
            raise ValueError("trace has no end event")
        return cls(events, end["success"], end["first_success"], end["steps"])

    @property
    def selections(self) -> list[str]:
        return [e["chosen"] for e in self.events if e["event"] == "select"]

    def failure_label(self) -> str | None:
        """Coarse failure category, or None for a successful episode."""
        if self.success:
            return None
        seg_ends = [e["outcome"] for e in self.events if e["event"] == "segment"]
        sels = self.selections
        for i in range(len(sels) - 2):
            if (all(o != Outcome.DEMO_COMPLETE.value for o in seg_ends[i:i + 2])
                    and sels[i] != sels[i + 1] and sels[i + 1] != sels[i + 2]):
                return "UndecidedFlow"
        if any(e["event"] == "grasp" and e["kind"] != e["demo"] for e in self.events):
            return "WrongObject"
        if any(o in (Outcome.TIMEOUT.value, Outcome.REGISTRATION_LOST.value) for o in seg_ends):
            return "IncorrectFlow"
        return "Other"


def _streams(rng) -> tuple[np.random.Generator, np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        rng = np.random.SeedSequence(rng.integers(2 ** 63))
    elif not isinstance(rng, np.random.SeedSequence):
        rng = np.random.SeedSequence(int(rng))
    a, b = rng.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def run_episode(state: SimState, demos: DemoSet, config: ServoConfig, sim: SimConfig,
                rng, drop_p: float = 0.0, recovery: Recovery | str = Recovery.RESELECT,
                estimator: FlowEstimator | None = None, model: MlpModel | None = None,
                cache: EpisodeCache | None = None, log_steps: bool = True,
                score_random: bool = False) -> EpisodeTrace:
    """Select, servo and reselect until every demonstrated subtask is done.

    ``rng`` (seed, SeedSequence or Generator) feeds two independent streams:
    one for random selection, one for drop draws. A demo that finishes is
    consumed. A demo that times out or loses registration stays available,
    but is not offered again until the scene has changed.

    ``score_random`` makes UniformRandom selections score every candidate
    anyway and log the scores, which is how training rows are collected.
    """
    recovery = Recovery(recovery)
    if not 0.0 <= drop_p <= 1.0:
        raise ValueError("drop_p must be a probability")
    if config.strategy == Strategy.MLP and model is None:
        raise ValueError("the Mlp strategy needs a trained model")
    estimator = estimator or get_estimator(config.estimator, sim)
    cache = cache or EpisodeCache()
    sel_rng, drop_rng = _streams(rng)
    limits = sim.limits
    trace = EpisodeTrace()
    trace.log(event="start", strategy=config.strategy.value, drop_p=drop_p, state=state.to_dict())

    remaining = set(demos.ids)
    # demos that timed out or lost registration since the last progress
    # (a completed demo or a drop); they are offered again after progress
    failed: set[str] = set()
    total = 0
    held_steps = 0
    first_done = False

    def live_frame(s):
        return render(s, sim)

    while remaining and total < config.max_total_steps and not task_success(state):
        candidates = sorted(remaining - failed)
        if not candidates:
            trace.log(event="stall", step=total)
            break
        live = live_frame(state)
        scored = config.strategy != Strategy.UNIFORM_RANDOM or score_random
        if not scored:
            reports = [ScoreReport(c, Unscorable("NotScored"), Unscorable("NotScored"),
                                   Unscorable("NotScored")) for c in candidates]
        else:
            reports = [cache.score(state, c, lambda c=c: score_demo(live, demos[c].first, c, estimator))
                       for c in candidates]
            if config.strategy == Strategy.MLP:
                reports = [replace(r, d_mlp=mlp_distance(r, model)) for r in reports]
        chosen = select_demo(reports, config.strategy, sel_rng)
        trace.log(event="select", step=total, chosen=chosen,
                  scores=[r.to_json() for r in reports] if scored else [])
        status = ServoStatus(chosen)

        demo = demos[status.demo_id]
        while status.running and total < config.max_total_steps:
            align = cache.align(state, demo.id, status.frame_index,
                                lambda: _align(live_frame(state), demo.frames[status.frame_index],
                                               estimator, config, limits))
            action, status = _advance(status, demo, align, state.gripper, config)
            before = state
            state = step(state, action, sim)
            total += 1
            if log_steps:
                trace.log(event="step", step=total, demo=demo.id, frame=status.frame_index,
                          action=action.as_list(), residual=_num(align.residual),
                          reason=align.reason)
            if before.held is None and state.held is not None:
                held_steps = 0
                trace.log(event="grasp", step=total, demo=demo.id,
                          kind=state.objects[state.held].kind)
            elif before.held is not None and state.held is None:
                trace.log(event="release", step=total, demo=demo.id,
                          kind=before.objects[before.held].kind,
                          inserted=state.objects[before.held].status.value == "inserted")
            elif state.held is not None:
                held_steps += 1
                if held_steps == config.drop_step:
                    dropped = inject_drop(state, drop_rng, drop_p, sim)
                    if dropped is not state:
                        kind = state.objects[state.held].kind
                        state = dropped
                        trace.log(event="drop", step=total, demo=demo.id, kind=kind)
                        failed.clear()
                        # Retrack keeps following the same demo from where it is
                        if status.running and recovery == Recovery.RESELECT:
                            status = replace(status, outcome=Outcome.DROPPED)
            if status.running and total >= config.max_total_steps:
                status = replace(status, outcome=Outcome.TIMEOUT)

        trace.log(event="segment", step=total, demo=demo.id, outcome=status.outcome.value,
                  frame=status.frame_index)
        if status.outcome == Outcome.DEMO_COMPLETE:
            remaining.discard(demo.id)
            failed.clear()
        elif status.outcome in (Outcome.TIMEOUT, Outcome.REGISTRATION_LOST):
            failed.add(demo.id)
        if not first_done:
            first_done = True
            trace.first_success = (status.outcome == Outcome.DEMO_COMPLETE
                                   and _kind_inserted(state, demo.id))

    trace.success = task_success(state)
    trace.steps = total
    trace.log(event="end", step=total, success=trace.success, first_success=trace.first_success,
              steps=total, state=state.to_dict())
    return trace


def _kind_inserted(state: SimState, kind: str) -> bool:
    try:
        return task_success(state, kind)
    except (KeyError, ValueError):
        return False
