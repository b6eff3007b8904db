import math

import numpy as np
import pytest

from condserv.demomodel import CameraIntrinsics, DemoSet, Demonstration, Frame, Gripper
from condserv.flow import BlockMatchFlow, FlowField, OracleFlow
from condserv.mlp import MlpModel
from condserv.registration import PointCloudPair, Registration, RigidTransform, register
from condserv.scoring import (INVALID_WARP_PENALTY, EmptyMask, ScoreReport, Strategy, Unscorable,
                              color_quality, mlp_distance, point_quality, reprojection,
                              score_all, score_demo)
from condserv.sim import demo_state, render, reset

K = CameraIntrinsics(30.0, 30.0, 7.5, 5.5)
RED, YELLOW = (1.0, 0.0, 0.0), (1.0, 1.0, 0.0)


def frame(rgb, mask=None):
    h, w = rgb.shape[:2]
    mask = np.ones((h, w), bool) if mask is None else mask
    return Frame(rgb=rgb, depth=np.full((h, w), 0.3, np.float32), mask=mask, intrinsics=K,
                 tcp_pose=(0.0, 0.0, 0.1, 0.0), gripper=Gripper.OPEN)


def solid(color, h=12, w=16):
    return np.broadcast_to(np.array(color), (h, w, 3)).copy()


def random_registration(rng, n=60):
    pd = rng.normal(size=(n, 3)) * 0.05
    pl = pd + rng.normal(scale=0.003, size=(n, 3))
    pair = PointCloudPair(pd, pl, rng.random((n, 3)), rng.random((n, 3)))
    return pair, register(pair)


# -- brute-force oracles ------------------------------------------------------------------

def naive_pq(reg, pair):
    r, t = reg.transform.R, reg.transform.t
    total = 0.0
    for i in reg.inliers:
        p = pair.demo_points[i]
        q = [sum(r[a][b] * p[b] for b in range(3)) + t[a] for a in range(3)]
        total += math.sqrt(sum((q[a] - pair.live_points[i][a]) ** 2 for a in range(3)))
    return total / len(reg.inliers)


def naive_cq(reg, pair):
    total = 0.0
    for i in reg.inliers:
        total += math.sqrt(sum((pair.demo_colors[i][a] - pair.live_colors[i][a]) ** 2
                               for a in range(3)))
    return total / len(reg.inliers)


def naive_rp(demo, live, flow):
    h, w = demo.shape
    total, count = 0.0, 0
    for y in range(h):
        for x in range(w):
            if not demo.mask[y, x]:
                continue
            count += 1
            xl, yl = x + flow.u[y, x], y + flow.v[y, x]
            if not flow.valid[y, x] or not (0 <= xl <= w - 1 and 0 <= yl <= h - 1):
                total += math.sqrt(3.0)
                continue
            x0, y0 = min(int(math.floor(xl)), w - 2), min(int(math.floor(yl)), h - 2)
            ax, ay = xl - x0, yl - y0
            err = 0.0
            for c in range(3):
                val = ((1 - ax) * (1 - ay) * live.rgb[y0, x0, c] + ax * (1 - ay) * live.rgb[y0, x0 + 1, c]
                       + (1 - ax) * ay * live.rgb[y0 + 1, x0, c] + ax * ay * live.rgb[y0 + 1, x0 + 1, c])
                err += (val - demo.rgb[y, x, c]) ** 2
            total += math.sqrt(err)
    return total / count


def test_point_quality_matches_naive_loop(rng):
    for _ in range(5):
        pair, reg = random_registration(rng)
        assert point_quality(reg, pair) == pytest.approx(naive_pq(reg, pair), abs=1e-12)


def test_color_quality_matches_naive_loop(rng):
    for _ in range(5):
        pair, reg = random_registration(rng)
        assert color_quality(reg, pair) == pytest.approx(naive_cq(reg, pair), abs=1e-12)


def test_reprojection_matches_naive_loop(rng):
    for _ in range(5):
        demo = frame(rng.random((12, 16, 3)), rng.random((12, 16)) < 0.6)
        live = frame(rng.random((12, 16, 3)))
        flow = FlowField(rng.uniform(-4, 4, (12, 16)), rng.uniform(-4, 4, (12, 16)),
                         rng.random((12, 16)) < 0.8)
        assert reprojection(demo, live, flow) == pytest.approx(naive_rp(demo, live, flow), abs=1e-12)


# -- worked examples --------------------------------------------------------------------------

def test_point_quality_examples(rng):
    p = rng.normal(size=(20, 3))
    ident = Registration(RigidTransform.identity(), np.arange(20), 0.0)
    same = PointCloudPair(p, p, np.zeros((20, 3)), np.zeros((20, 3)))
    assert point_quality(ident, same) == pytest.approx(0.0, abs=1e-12)
    dirs = rng.normal(size=(20, 3))
    shifted = p + 0.002 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    assert point_quality(ident, PointCloudPair(p, shifted, np.zeros((20, 3)), np.zeros((20, 3)))) \
        == pytest.approx(0.002, abs=1e-12)


def test_color_quality_red_vs_yellow(rng):
    p = rng.normal(size=(10, 3))
    pair = PointCloudPair(p, p, np.tile(RED, (10, 1)), np.tile(YELLOW, (10, 1)))
    reg = Registration(RigidTransform.identity(), np.arange(10), 0.0)
    assert color_quality(reg, pair) == pytest.approx(1.0)
    same = PointCloudPair(p, p, np.tile(RED, (10, 1)), np.tile(RED, (10, 1)))
    assert color_quality(reg, same) == 0.0


def test_color_quality_uses_only_the_inliers(rng):
    p = rng.normal(size=(10, 3))
    live_colors = np.tile(RED, (10, 1))
    live_colors[0] = YELLOW
    pair = PointCloudPair(p, p, np.tile(RED, (10, 1)), live_colors)
    reg = Registration(RigidTransform.identity(), np.arange(1, 10), 0.0)
    assert color_quality(reg, pair) == 0.0


def test_distances_need_three_inliers(rng):
    p = rng.normal(size=(5, 3))
    pair = PointCloudPair(p, p, p, p)
    reg = Registration(RigidTransform.identity(), np.arange(2), 0.0)
    with pytest.raises(ValueError):
        point_quality(reg, pair)
    with pytest.raises(ValueError):
        color_quality(reg, pair)


def test_reprojection_self_pair_is_zero(rng):
    f = frame(rng.random((12, 16, 3)))
    assert reprojection(f, f, FlowField.zeros((12, 16), valid=True)) == 0.0


def test_reprojection_red_vs_yellow():
    demo, live = frame(solid(RED)), frame(solid(YELLOW))
    assert reprojection(demo, live, FlowField.zeros((12, 16), valid=True)) == pytest.approx(1.0)


def test_reprojection_half_invalid_costs_half_the_penalty(rng):
    f = frame(rng.random((12, 16, 3)))
    valid = np.zeros((12, 16), bool)
    valid[:, :8] = True
    d = reprojection(f, f, FlowField(np.zeros((12, 16)), np.zeros((12, 16)), valid))
    assert d == pytest.approx(math.sqrt(3) / 2, abs=1e-12)
    assert INVALID_WARP_PENALTY == pytest.approx(math.sqrt(3))


def test_reprojection_counts_only_mask_pixels(rng):
    img = rng.random((12, 16, 3))
    mask = np.zeros((12, 16), bool)
    mask[2:5, 3:9] = True
    other = img.copy()
    other[~mask] = 0.0
    d = reprojection(frame(img, mask), frame(other), FlowField.zeros((12, 16), valid=True))
    assert d == 0.0


def test_reprojection_empty_mask():
    f = frame(solid(RED), np.zeros((12, 16), bool))
    with pytest.raises(EmptyMask):
        reprojection(f, f, FlowField.zeros((12, 16), valid=True))


def test_reprojection_grows_with_noise(rng):
    base = rng.random((12, 16, 3))
    noise = rng.normal(size=base.shape)
    flow = FlowField.zeros((12, 16), valid=True)
    ladder = [reprojection(frame(base), frame(base + s * noise), flow) for s in (0, 0.01, 0.05, 0.2)]
    assert ladder[0] == 0.0
    assert all(a < b for a, b in zip(ladder, ladder[1:]))


# -- mlp distance ------------------------------------------------------------------------------

def test_mlp_distance_of_zero_model_is_half():
    report = ScoreReport("a", 0.001, 0.1, 0.2)
    assert mlp_distance(report, MlpModel.zeros()) == pytest.approx(0.5)


def test_mlp_distance_is_one_minus_probability():
    model = MlpModel.zeros()
    model.biases[-1][:] = math.log(9.0)  # sigmoid -> 0.9
    assert mlp_distance(ScoreReport("a", 0.001, 0.1, 0.2), model) == pytest.approx(0.1)


def test_mlp_distance_propagates_unscorable():
    u = Unscorable("InsufficientInliers")
    assert mlp_distance(ScoreReport("a", u, u, 0.3), MlpModel.zeros()) == u


# -- reports -------------------------------------------------------------------------------

def test_report_distance_lookup():
    r = ScoreReport("a", 0.1, 0.2, 0.3, 0.4, 7)
    assert [r.distance(s) for s in ("PointQuality", "ColorQuality", "Reprojection", "Mlp")] == \
        [0.1, 0.2, 0.3, 0.4]
    assert r.features == [0.1, 0.2, 0.3]
    assert isinstance(ScoreReport("a", 0.1, 0.2, 0.3).distance(Strategy.MLP), Unscorable)
    with pytest.raises(ValueError):
        r.distance("Nearest")


def test_report_json():
    u = Unscorable("EmptyMask")
    assert ScoreReport("a", u, u, 0.5).to_json() == {
        "demo_id": "a", "d_pq": {"unscorable": "EmptyMask"}, "d_cq": {"unscorable": "EmptyMask"},
        "d_rp": 0.5, "d_mlp": None, "inlier_count": 0}


# -- scoring demos against live frames ---------------------------------------------------------------

def test_self_pair_scores_zero(sim, demos, oracle):
    for d in demos:
        r = score_demo(d.first, d.first, d.id, oracle)
        assert r.d_rp == 0.0
        assert r.d_pq == pytest.approx(0.0, abs=1e-9)
        assert r.d_cq == 0.0


def test_matching_demo_scores_smaller(sim, demos, oracle):
    for kind in ("square", "triangle", "trapezoid"):
        live = render(demo_state(sim, kind), sim)
        reports = {r.demo_id: r for r in score_all(live, demos, oracle)}
        for other in reports:
            if other != kind:
                assert reports[kind].d_rp < reports[other].d_rp


def test_matching_demo_scores_smaller_with_block_matching(sim, demos):
    live = render(demo_state(sim, "triangle"), sim)
    reports = {r.demo_id: r for r in score_all(live, demos, BlockMatchFlow())}
    assert reports["triangle"].d_rp < min(reports["square"].d_rp, reports["trapezoid"].d_rp)


def test_registration_failure_is_unscorable_not_an_error(sim, demos, oracle):
    # the square is gone from the live scene: no correspondences on the mask
    s = demo_state(sim, "triangle")
    live = render(s, sim)
    r = score_demo(live, demos["square"].first, "square", oracle)
    assert isinstance(r.d_pq, Unscorable) and r.d_pq.reason == "InsufficientCorrespondences"
    assert r.d_cq == r.d_pq
    assert r.d_rp == pytest.approx(math.sqrt(3))
    assert r.features is None and r.inlier_count == 0


def test_empty_mask_demo_is_unscorable(demos, oracle):
    d = demos["square"]
    f = d.first
    blank = Frame(f.rgb, f.depth, np.zeros(f.mask.shape, bool), f.intrinsics, f.tcp_pose,
                  f.gripper, state=f.state)
    r = score_demo(f, blank, "blank", oracle, MlpModel.zeros())
    assert r.d_pq == r.d_cq == r.d_rp == r.d_mlp == Unscorable("EmptyMask")


def test_single_demo_set_gives_one_report(sim, demos, oracle):
    live = render(reset(sim, 0), sim)
    reports = score_all(live, DemoSet((demos["square"],)), oracle)
    assert [r.demo_id for r in reports] == ["square"]


def test_model_adds_the_learned_distance(sim, demos, oracle):
    live = render(reset(sim, 3), sim)
    reports = score_all(live, demos, oracle, MlpModel.zeros())
    for r in reports:
        assert r.d_mlp == (0.5 if r.features is not None else r.d_mlp)
        assert r.d_mlp is not None


def test_distances_are_non_negative(sim, demos, oracle):
    for seed in range(6):
        live = render(reset(sim, seed), sim)
        for r in score_all(live, demos, oracle):
            for v in (r.d_pq, r.d_cq, r.d_rp):
                assert isinstance(v, Unscorable) or v >= 0.0


def test_scoring_is_deterministic(sim, demos):
    live = render(reset(sim, 5), sim)
    a = score_all(live, demos, BlockMatchFlow())
    b = score_all(live, demos, BlockMatchFlow())
    assert a == b


def test_fully_invalid_warps_tie_exactly(rng):
    for n in (3, 7, 50):
        mask = np.zeros((12, 16), bool)
        mask.flat[:n] = True
        f = frame(rng.random((12, 16, 3)), mask)
        assert reprojection(f, f, FlowField.zeros((12, 16))) == INVALID_WARP_PENALTY
