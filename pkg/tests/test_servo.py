import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condserv.demomodel import Gripper
from condserv.flow import BlockMatchFlow
from condserv.scoring import ScoreReport, Strategy, Unscorable
from condserv.servo import (EpisodeCache, EpisodeTrace, Outcome, Recovery, ServoConfig,
                            ServoStatus, run_episode, select_demo, servo_step)
from condserv.sim import BOX, Action, demo_state, render, render_buffers, reset, step


def rep(demo_id, d):
    u = Unscorable("InsufficientInliers")
    v = u if d is None else d
    return ScoreReport(demo_id, v, v, v)


# -- servo_step ------------------------------------------------------------------------

def test_self_pair_gives_zero_motion_and_advances(demos, oracle):
    d = demos["square"]
    action, status = servo_step(d.first, d, ServoStatus("square"), oracle, ServoConfig())
    assert (action.dx, action.dy, action.dz, action.dtheta) == pytest.approx((0, 0, 0, 0), abs=1e-9)
    assert status.frame_index == 1 and status.outcome == Outcome.RUNNING
    assert action.gripper == d.frames[0].gripper


def test_last_frame_aligned_completes_the_demo(demos, oracle):
    d = demos["triangle"]
    last = len(d) - 1
    _, status = servo_step(d.frames[last], d, ServoStatus("triangle", frame_index=last), oracle,
                           ServoConfig())
    assert status.outcome == Outcome.DEMO_COMPLETE and status.frame_index == last


def test_registration_lost_after_five_failures(sim, demos, oracle):
    d = demos["square"]
    live = render(demo_state(sim, "triangle"), sim)  # no square anywhere
    status = ServoStatus("square")
    for k in range(1, 6):
        action, status = servo_step(live, d, status, oracle, ServoConfig())
        assert status.failures == k
        assert (action.dx, action.dy, action.dz, action.dtheta) == (0, 0, 0, 0)
    assert status.outcome == Outcome.REGISTRATION_LOST
    with pytest.raises(ValueError):
        servo_step(live, d, status, oracle, ServoConfig())


def test_failures_reset_after_a_good_registration(sim, demos, oracle):
    d = demos["square"]
    bad = render(demo_state(sim, "triangle"), sim)
    _, status = servo_step(bad, d, ServoStatus("square"), oracle, ServoConfig())
    _, status = servo_step(d.first, d, status, oracle, ServoConfig())
    assert status.failures == 0 and status.frame_index == 1


def test_misaligned_view_moves_without_advancing(sim, demos, oracle):
    d = demos["square"]
    live_state = step(d.first.state, Action(0.01, -0.006, 0.0, 0.08), sim)
    live = render(live_state, sim)
    action, status = servo_step(live, d, ServoStatus("square"), oracle, ServoConfig())
    assert status.frame_index == 0 and status.running
    assert abs(action.dx) > 0.003 and abs(action.dtheta) > 0.03
    assert action.gripper == live.gripper


def test_frame_timeout(sim, demos, oracle):
    d = demos["square"]
    live = render(step(d.first.state, Action(0.01, 0.0, 0.0, 0.0), sim), sim)
    _, status = servo_step(live, d, ServoStatus("square"), oracle, ServoConfig(max_frame_steps=1))
    assert status.outcome == Outcome.TIMEOUT


def test_servo_config_checks():
    with pytest.raises(ValueError):
        ServoConfig(eps_pos=0)
    with pytest.raises(ValueError):
        ServoConfig(lost_after=0)
    assert ServoConfig(strategy="Mlp").strategy == Strategy.MLP


# -- selection -------------------------------------------------------------------------------

def test_single_demo_is_always_chosen():
    for s in Strategy:
        r = [ScoreReport("only", 0.1, 0.1, 0.1, 0.1)]
        assert select_demo(r, s, np.random.default_rng(0)) == "only"


def test_argmin_skips_unscorable():
    reports = [rep("A", 0.2), rep("B", 0.1), rep("C", None)]
    for s in (Strategy.POINT_QUALITY, Strategy.COLOR_QUALITY, Strategy.REPROJECTION):
        assert select_demo(reports, s, np.random.default_rng(0)) == "B"


def test_ties_break_by_id():
    reports = [rep("b", 0.1), rep("a", 0.1), rep("c", 0.1)]
    assert select_demo(reports, Strategy.REPROJECTION, np.random.default_rng(0)) == "a"


def test_all_unscorable_falls_back_to_a_seeded_uniform_pick():
    reports = [rep(k, None) for k in "abc"]
    picks = [select_demo(reports, Strategy.REPROJECTION, np.random.default_rng(s)) for s in range(60)]
    again = [select_demo(reports, Strategy.REPROJECTION, np.random.default_rng(s)) for s in range(60)]
    assert picks == again and set(picks) == {"a", "b", "c"}


def test_uniform_random_is_uniform():
    reports = [rep(k, 0.1) for k in "abc"]
    rng = np.random.default_rng(0)
    picks = [select_demo(reports, Strategy.UNIFORM_RANDOM, rng) for _ in range(3000)]
    for k in "abc":
        assert abs(picks.count(k) / 3000 - 1 / 3) < 0.03


def test_select_needs_candidates():
    with pytest.raises(ValueError):
        select_demo([], Strategy.REPROJECTION, np.random.default_rng(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=1, max_size=6, unique=True),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_choice_is_invariant_to_monotone_rescaling(ints, scale, shift):
    values = [i / 100 for i in ints]
    ids = [f"d{i}" for i in range(len(values))]
    a = select_demo([rep(k, v) for k, v in zip(ids, values)], Strategy.REPROJECTION,
                    np.random.default_rng(0))
    b = select_demo([rep(k, scale * v + shift) for k, v in zip(ids, values)], Strategy.REPROJECTION,
                    np.random.default_rng(0))
    c = select_demo([rep(k, float(np.exp(v))) for k, v in zip(ids, values)], Strategy.REPROJECTION,
                    np.random.default_rng(0))
    assert a == b == c


# -- episodes -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def episode(sim, demos):
    return run_episode(reset(sim, 4), demos, ServoConfig(), sim, rng=4)


def test_episode_succeeds_in_the_common_case(sim, demos):
    wins = sum(run_episode(reset(sim, s), demos, ServoConfig(), sim, rng=s).first_success
               for s in range(6))
    assert wins >= 4


def test_episode_is_deterministic(sim, demos, episode):
    again = run_episode(reset(sim, 4), demos, ServoConfig(), sim, rng=4)
    assert again.to_jsonl() == episode.to_jsonl()


def test_shared_cache_does_not_change_the_trace(sim, demos, episode):
    cache = EpisodeCache()
    a = run_episode(reset(sim, 4), demos, ServoConfig(), sim, rng=4, cache=cache)
    b = run_episode(reset(sim, 4), demos, ServoConfig(), sim, rng=4, cache=cache)
    assert a.to_jsonl() == b.to_jsonl() == episode.to_jsonl()


def test_trace_jsonl_round_trip(episode):
    back = EpisodeTrace.from_jsonl(episode.to_jsonl())
    assert back.events == episode.events
    assert (back.success, back.first_success, back.steps) == \
        (episode.success, episode.first_success, episode.steps)
    with pytest.raises(ValueError):
        EpisodeTrace.from_jsonl('{"event": "start"}\n')


def test_trace_records_selections_and_scores(episode):
    kinds = [e["event"] for e in episode.events]
    assert kinds[0] == "start" and kinds[-1] == "end"
    sel = [e for e in episode.events if e["event"] == "select"]
    assert sel and all(len(e["scores"]) >= 1 for e in sel)
    assert episode.selections == [e["chosen"] for e in sel]


def test_steps_increase_and_respect_the_cap(sim, demos, episode):
    steps = [e["step"] for e in episode.events if e["event"] == "step"]
    assert steps == list(range(1, len(steps) + 1))
    short = run_episode(reset(sim, 4), demos, ServoConfig(max_total_steps=30), sim, rng=4)
    assert short.steps <= 30 and not short.success


def test_consumed_demos_are_never_reselected(sim, demos):
    for seed in range(4):
        trace = run_episode(reset(sim, seed), demos, ServoConfig(), sim, rng=seed)
        done = set()
        for e in trace.events:
            if e["event"] == "select":
                assert e["chosen"] not in done
            if e["event"] == "segment" and e["outcome"] == "DemoComplete":
                done.add(e["demo"])


def test_square_only_scene_selects_the_square_first(sim, demos):
    checked = 0
    for seed in range(10):
        s = reset(sim, seed)
        square = next(o for o in s.objects if o.kind == "square")
        s = s.with_(objects=(square,))
        ids = render_buffers(s, sim).ids
        border = np.r_[ids[0], ids[-1], ids[:, 0], ids[:, -1]]
        if not (ids == 0).any() or (border == 0).any():
            continue  # not fully inside the home view
        trace = run_episode(s, demos, ServoConfig(max_total_steps=1), sim, rng=seed)
        assert trace.selections[0] == "square"
        checked += 1
    assert checked >= 4


def test_drops_with_retrack_always_fail(sim, demos):
    trace = run_episode(reset(sim, 1), demos, ServoConfig(), sim, rng=1, drop_p=1.0,
                        recovery=Recovery.RETRACK)
    assert not trace.success and not trace.first_success
    assert any(e["event"] == "drop" for e in trace.events)


def test_drops_with_reselect_end_the_segment(sim, demos):
    trace = run_episode(reset(sim, 1), demos, ServoConfig(), sim, rng=1, drop_p=1.0,
                        recovery=Recovery.RESELECT, log_steps=False)
    drops = [i for i, e in enumerate(trace.events) if e["event"] == "drop"]
    assert drops
    nxt = trace.events[drops[0] + 1]
    assert nxt["event"] == "segment" and nxt["outcome"] == "Dropped"
    assert not trace.success


def test_no_drops_means_recovery_mode_is_irrelevant(sim, demos):
    a = run_episode(reset(sim, 2), demos, ServoConfig(), sim, rng=2, recovery="Reselect")
    b = run_episode(reset(sim, 2), demos, ServoConfig(), sim, rng=2, recovery="Retrack")
    assert a.to_jsonl() == b.to_jsonl()


def test_run_episode_argument_checks(sim, demos):
    with pytest.raises(ValueError):
        run_episode(reset(sim, 0), demos, ServoConfig(), sim, rng=0, drop_p=1.5)
    with pytest.raises(ValueError):
        run_episode(reset(sim, 0), demos, ServoConfig(strategy="Mlp"), sim, rng=0)


def test_uniform_random_does_not_score_unless_asked(sim, demos):
    cfg = ServoConfig(strategy="UniformRandom", max_total_steps=1)
    plain = run_episode(reset(sim, 0), demos, cfg, sim, rng=0)
    scored = run_episode(reset(sim, 0), demos, cfg, sim, rng=0, score_random=True)
    first = lambda t: next(e for e in t.events if e["event"] == "select")  # noqa: E731
    assert first(plain)["scores"] == [] and len(first(scored)["scores"]) == 3
    assert first(plain)["chosen"] == first(scored)["chosen"]


def test_block_matching_episode_runs(sim, demos):
    cfg = ServoConfig(estimator="blockmatch", max_total_steps=40)
    trace = run_episode(reset(sim, 0), demos, cfg, sim, rng=0, estimator=BlockMatchFlow())
    assert trace.steps <= 40 and trace.events[-1]["event"] == "end"


# -- failure taxonomy ---------------------------------------------------------------------------

def synthetic_trace(events, success=False):
    return EpisodeTrace([{"event": "start"}, *events, {"event": "end"}], success=success)


def sel(d):
    return {"event": "select", "chosen": d}


def seg(d, outcome):
    return {"event": "segment", "demo": d, "outcome": outcome}


def test_failure_labels():
    assert synthetic_trace([], success=True).failure_label() is None
    undecided = [sel("a"), seg("a", "Timeout"), sel("b"), seg("b", "Timeout"), sel("a"),
                 seg("a", "Timeout")]
    assert synthetic_trace(undecided).failure_label() == "UndecidedFlow"
    wrong = [sel("square"), {"event": "grasp", "demo": "square", "kind": "triangle"},
             seg("square", "Timeout")]
    assert synthetic_trace(wrong).failure_label() == "WrongObject"
    lost = [sel("a"), seg("a", "RegistrationLost"), sel("a"), seg("a", "DemoComplete")]
    assert synthetic_trace(lost).failure_label() == "IncorrectFlow"
    other = [sel("a"), seg("a", "DemoComplete")]
    assert synthetic_trace(other).failure_label() == "Other"


def test_undecided_takes_priority_over_wrong_object():
    events = [sel("a"), {"event": "grasp", "demo": "a", "kind": "b"}, seg("a", "Timeout"),
              sel("b"), seg("b", "Timeout"), sel("a"), seg("a", "Timeout")]
    assert synthetic_trace(events).failure_label() == "UndecidedFlow"


def test_demo_frames_carry_the_gripper_commands(sim, demos):
    frames = demos["square"].frames
    grips = [f.gripper for f in frames]
    assert Gripper.CLOSED in grips and grips[-1] == Gripper.OPEN
    # the final frames attend to the box, the first to the piece
    assert np.array_equal(frames[-1].mask, render_buffers(frames[-1].state, sim).ids == BOX)
    assert np.array_equal(frames[0].mask, render_buffers(frames[0].state, sim).ids == 0)
