# -*- coding: utf-8 -*-
import math

import numpy as np
import pytest

from conftest import straight_poses
from trajgeo import (
    Pose, Trajectory, TrajectorySet, History, Route, RoadBoundary, VehicleFootprint, AgentTrack,
    LengthMismatch, EmptySet, ClockMismatch, EmptyCorpus, InvalidPolygon, InvalidTrajectory,
    ade, fde, set_metrics, corner_keypoints, corner_distance, set_corner_distance,
    collision_check, collision_rate, offroad_check, offroad_rate, point_in_polygon, wrap_angle,
    polygon_area, is_simple_polygon,
)

FP = VehicleFootprint(4.6, 1.8)


def _shift(traj, dx=0.0, dy=0.0, dh=0.0):
    p = traj.poses.copy()
    p[:, 0] += dx
    p[:, 1] += dy
    p[:, 3] += dh
    return Trajectory(p)


def _crossing_agent(x_cross, t_cross, speed=10.0, agent_id="a"):
    """沿 +y 穿越 ego 路徑，t_cross 時抵達 y=0"""
    t = 0.1 * np.arange(1, 65)
    p = np.zeros((64, 4))
    p[:, 0] = x_cross
    p[:, 1] = speed * (t - t_cross)
    p[:, 3] = math.pi / 2
    return AgentTrack(agent_id, FP, Trajectory(p))


# ========== 型別 ==========
def test_trajectory_validation():
    with pytest.raises(LengthMismatch):
        Trajectory(np.zeros((10, 4)))
    bad = straight_poses()
    bad[3, 1] = np.nan
    with pytest.raises(InvalidTrajectory):
        Trajectory(bad)
    assert Trajectory(straight_poses()).pose(9).x == pytest.approx(1.0 * 10)


def test_heading_wrapped():
    p = straight_poses()
    p[:, 3] = 3 * math.pi
    assert np.allclose(Trajectory(p).heading, math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert Pose(0, 0, 0, 2 * math.pi).heading == pytest.approx(0.0)


def test_route_spacing_and_empty_set():
    Route([[4.0 * (i + 1), 0.0] for i in range(20)])
    with pytest.raises(InvalidTrajectory):
        Route([[5.0 * (i + 1), 0.0] for i in range(20)])
    with pytest.raises(EmptySet):
        TrajectorySet(())


def test_boundary_validation():
    with pytest.raises(InvalidPolygon):
        RoadBoundary([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(InvalidPolygon):
        RoadBoundary([[0, 0], [2, 2], [2, 0], [0, 2]])  # 蝴蝶結


# ========== ADE / FDE ==========
def test_ade_fde_examples():
    ref = Trajectory(straight_poses())
    assert ade(ref, ref) == 0.0
    assert ade(_shift(ref, dy=1.0), ref) == pytest.approx(1.0)
    assert fde(_shift(ref, dy=1.0), ref) == pytest.approx(1.0)


def test_ade_matches_loop_and_is_rigid_invariant():
    rng = np.random.default_rng(5)
    a = Trajectory(rng.normal(size=(64, 4)))
    b = Trajectory(rng.normal(size=(64, 4)))
    loop = sum(math.hypot(a.poses[i, 0] - b.poses[i, 0], a.poses[i, 1] - b.poses[i, 1]) for i in range(64)) / 64
    assert ade(a, b) == pytest.approx(loop, abs=1e-9)
    assert fde(a, b) == pytest.approx(math.hypot(*(a.poses[63, :2] - b.poses[63, :2])), abs=1e-9)

    th = 0.7
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])

    def rigid(t):
        p = t.poses.copy()
        p[:, :2] = p[:, :2] @ rot.T + np.array([3.0, -2.0])
        return Trajectory(p)

    assert ade(rigid(a), rigid(b)) == pytest.approx(ade(a, b), abs=1e-9)


def test_set_metrics():
    ref = Trajectory(straight_poses())
    m = set_metrics(TrajectorySet((ref, _shift(ref, dy=1.0))), ref)
    assert (m.min_ade, m.avg_ade, m.min_fde, m.avg_fde) == pytest.approx((0.0, 0.5, 0.0, 0.5))
    single = set_metrics(TrajectorySet((_shift(ref, dx=2.0),)), ref)
    assert single.min_ade == single.avg_ade and single.min_fde == single.avg_fde


def test_set_metrics_random_modes():
    rng = np.random.default_rng(9)
    ref = Trajectory(rng.normal(size=(64, 4)))
    modes = [Trajectory(rng.normal(size=(64, 4))) for _ in range(6)]
    m = set_metrics(TrajectorySet(tuple(modes)), ref)
    assert m.min_ade == pytest.approx(min(ade(x, ref) for x in modes))
    assert m.avg_fde == pytest.approx(np.mean([fde(x, ref) for x in modes]))
    assert m.min_ade <= m.avg_ade and m.min_fde <= m.avg_fde


# ========== 車角 ==========
def test_corner_keypoints():
    c = corner_keypoints(Pose(0, 0, 0, 0), FP)
    assert sorted(map(tuple, np.round(c, 9))) == sorted([(2.3, 0.9), (2.3, -0.9), (-2.3, -0.9), (-2.3, 0.9)])
    c = corner_keypoints(Pose(0, 0, 0, math.pi / 2), FP)
    assert sorted(map(tuple, np.round(c, 9))) == sorted([(-0.9, 2.3), (0.9, 2.3), (0.9, -2.3), (-0.9, -2.3)])


def test_corner_distance():
    ref = Trajectory(straight_poses())
    assert corner_distance(ref, ref, FP) == 0.0
    expected = 2 * math.sin(0.05) * math.hypot(2.3, 0.9)
    assert corner_distance(_shift(ref, dh=0.1), ref, FP) == pytest.approx(expected, abs=1e-9)
    assert corner_distance(_shift(ref, dx=0.6, dy=0.8), ref, FP) == pytest.approx(1.0)
    # 純平移：車角距離等於中心 ADE
    moved = _shift(ref, dy=0.3)
    assert corner_distance(moved, ref, FP) == pytest.approx(ade(moved, ref), abs=1e-12)


def test_set_corner_distance_uses_best_mode():
    ref = Trajectory(straight_poses())
    s = TrajectorySet((_shift(ref, dy=2.0), _shift(ref, dy=0.5)))
    assert set_corner_distance(s, ref, FP) == pytest.approx(0.5)


# ========== 碰撞 ==========
def test_collision_crossing_parallel_and_window():
    ego = Trajectory(straight_poses(10.0))
    assert collision_check(ego, FP, [_crossing_agent(20.0, 2.0)])

    par = straight_poses(10.0)
    par[:, 1] = 3.5
    assert not collision_check(ego, FP, [AgentTrack("p", FP, Trajectory(par))])

    late = _crossing_agent(55.0, 5.5)
    assert not collision_check(ego, FP, [late], window=5.0)
    assert collision_check(ego, FP, [late], window=6.4)


def test_collision_clock_mismatch():
    class Short:
        id = "s"
        footprint = FP
        trajectory = np.zeros((32, 4))

    ego = Trajectory(straight_poses())
    with pytest.raises(ClockMismatch):
        collision_check(ego, FP, [Short()])


# 獨立實作：不共用 trajgeo 的內插、車角與重疊測試
def _pose_at(poses, t):
    """poses[i] 在 (i+1)*0.1 秒，兩點間線性內插，航向取最短轉向"""
    u = t * 10.0 - 1.0
    i = max(0, min(int(math.floor(u + 1e-9)), len(poses) - 2))
    f = min(max(u - i, 0.0), 1.0)
    x0, y0, _, h0 = poses[i]
    x1, y1, _, h1 = poses[i + 1]
    dh = (h1 - h0 + math.pi) % (2 * math.pi) - math.pi
    return x0 + f * (x1 - x0), y0 + f * (y1 - y0), h0 + f * dh


def _box(x, y, h, length, width):
    c, s = math.cos(h), math.sin(h)
    l, w = length / 2, width / 2
    return [(x + c * dx - s * dy, y + s * dx + c * dy) for dx, dy in ((l, w), (-l, w), (-l, -w), (l, -w))]


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _inside_convex(p, quad):
    return all(_cross(quad[i], quad[(i + 1) % 4], p) >= 0 for i in range(4))


def _quads_overlap(a, b):
    if any(_inside_convex(p, b) for p in a) or any(_inside_convex(p, a) for p in b):
        return True
    for i in range(4):
        p1, p2 = a[i], a[(i + 1) % 4]
        for j in range(4):
            q1, q2 = b[j], b[(j + 1) % 4]
            if _cross(p1, p2, q1) * _cross(p1, p2, q2) < 0 and _cross(q1, q2, p1) * _cross(q1, q2, p2) < 0:
                return True
    return False


def _oracle_collides(ego_poses, ego_dims, ag_poses, ag_dims, window=5.0):
    reach = (math.hypot(*ego_dims) + math.hypot(*ag_dims)) / 2
    for j in range(10, int(round(window * 100)) + 1):
        ex, ey, eh = _pose_at(ego_poses, j / 100)
        ax, ay, ah = _pose_at(ag_poses, j / 100)
        if math.hypot(ex - ax, ey - ay) > reach:
            continue
        if _quads_overlap(_box(ex, ey, eh, *ego_dims), _box(ax, ay, ah, *ag_dims)):
            return True
    return False


def _oracle_verdict(ego_poses, ag_poses, ag_dims, margin=0.05):
    """車框各邊縮放 margin 後結論一致才算數，否則回傳 None"""
    ego_dims = (FP.length, FP.width)
    grow = lambda d, m: (d[0] + 2 * m, d[1] + 2 * m)
    hi = _oracle_collides(ego_poses, grow(ego_dims, margin), ag_poses, grow(ag_dims, margin))
    lo = _oracle_collides(ego_poses, grow(ego_dims, -margin), ag_poses, grow(ag_dims, -margin))
    return hi if hi == lo else None


_T = 0.1 * np.arange(1, 65)


def _crossing_case(rng):
    v = rng.uniform(6, 14)
    ego = straight_poses(v)
    t_cross = rng.uniform(0.3, 5.5)
    x_cross = v * t_cross + rng.uniform(-6, 6)
    angle = rng.uniform(0.5, math.pi - 0.5) * rng.choice([-1, 1])
    va = rng.uniform(4, 12)
    ag = np.zeros((64, 4))
    ag[:, 0] = x_cross + va * math.cos(angle) * (_T - t_cross)
    ag[:, 1] = va * math.sin(angle) * (_T - t_cross)
    ag[:, 3] = angle
    return ego, ag


def _parallel_case(rng):
    v = rng.uniform(6, 14)
    ego = straight_poses(v)
    lateral = rng.uniform(1.2, 2.8) * rng.choice([-1, 1])
    ag = np.zeros((64, 4))
    va = rng.uniform(0, 16)
    if rng.random() < 0.5:
        ag[:, 0] = rng.uniform(-10, 40) + va * _T
        ag[:, 3] = 0.0
    else:
        ag[:, 0] = rng.uniform(30, 120) - va * _T
        ag[:, 3] = math.pi
    ag[:, 1] = lateral + rng.uniform(-0.05, 0.05) * _T
    return ego, ag


def _turning_case(rng):
    v = rng.uniform(5, 12)
    w = rng.uniform(0.2, 0.6) * rng.choice([-1, 1])
    ego = np.zeros((64, 4))
    ego[:, 0] = v / w * np.sin(w * _T)
    ego[:, 1] = v / w * (1 - np.cos(w * _T))
    ego[:, 3] = w * _T
    k = int(rng.integers(4, 50))
    ag = np.zeros((64, 4))
    ag[:, 0] = ego[k, 0] + rng.normal(0, 2.5)
    ag[:, 1] = ego[k, 1] + rng.normal(0, 2.5)
    ag[:, 3] = rng.uniform(-math.pi, math.pi)
    return ego, ag


COLLISION_FAMILIES = {"crossing": _crossing_case, "parallel": _parallel_case, "turning": _turning_case}


@pytest.mark.slow
@pytest.mark.parametrize("family", list(COLLISION_FAMILIES))
def test_collision_agrees_with_independent_oracle(family):
    rng = np.random.default_rng(21)
    make = COLLISION_FAMILIES[family]
    outcomes = {True: 0, False: 0}
    while sum(outcomes.values()) < 500:
        ego_poses, ag_poses = make(rng)
        ag_dims = (rng.uniform(3.5, 5.5), rng.uniform(1.6, 2.2))
        truth = _oracle_verdict(ego_poses, ag_poses, ag_dims)
        if truth is None:
            continue  # 間距在 ±0.05 m 內
        agent = AgentTrack("x", VehicleFootprint(*ag_dims), Trajectory(ag_poses))
        assert collision_check(Trajectory(ego_poses), FP, [agent]) == truth, (family, ego_poses[0], ag_poses[0])
        outcomes[truth] += 1
    assert outcomes[True] >= 25 and outcomes[False] >= 25, outcomes


def test_collision_rate_counting():
    ego = Trajectory(straight_poses(10.0))
    agents = [_crossing_agent(20.0, 2.0)]
    safe = _shift(ego, dy=-20.0)
    corpus = [(TrajectorySet((ego,) + (safe,) * 5), agents), (TrajectorySet((safe,) * 6), agents)]
    assert collision_rate(corpus, FP) == pytest.approx(1 / 12)
    assert collision_rate(corpus, FP, scene_level=True) == pytest.approx(0.5)
    with pytest.raises(EmptyCorpus):
        collision_rate([], FP)


# ========== 出界 ==========
CORRIDOR = RoadBoundary([[-10, -3.5], [80, -3.5], [80, 3.5], [-10, 3.5]])


def test_offroad_examples():
    ego = Trajectory(straight_poses(10.0))
    assert not offroad_check(ego, FP, CORRIDOR)
    assert offroad_check(_shift(ego, dy=3.0), FP, CORRIDOR)


def test_offroad_boundary_inclusive():
    ego = Trajectory(straight_poses(10.0))
    hull = RoadBoundary([[0.1 - 2.3, -0.9], [6.4 + 2.3, -0.9], [6.4 + 2.3, 0.9], [0.1 - 2.3, 0.9]])
    # 速度 1 m/s 才能讓車角剛好落在外殼上
    slow = Trajectory(straight_poses(1.0))
    assert not offroad_check(slow, FP, hull)
    assert point_in_polygon([80, 0], CORRIDOR.polygon)
    assert not point_in_polygon([80.01, 0], CORRIDOR.polygon)
    assert offroad_check(ego, FP, hull)


def test_offroad_monotone_in_footprint():
    rng = np.random.default_rng(4)
    for _ in range(30):
        traj = _shift(Trajectory(straight_poses(10.0)), dy=rng.uniform(-3, 3), dh=rng.uniform(-0.3, 0.3))
        small = offroad_check(traj, VehicleFootprint(4.0, 1.5), CORRIDOR)
        big = offroad_check(traj, VehicleFootprint(5.0, 2.0), CORRIDOR)
        assert big or not small


def test_offroad_rate():
    ego = Trajectory(straight_poses(10.0))
    corpus = [(TrajectorySet((ego, _shift(ego, dy=3.0))), CORRIDOR)]
    assert offroad_rate(corpus, FP) == pytest.approx(0.5)


def _on_edge(p, a, b, tol=1e-9):
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    if abs(_cross(a, b, p)) > tol * length:
        return False
    dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])
    return -tol * length <= dot <= length * length + tol * length


def _oracle_inside(p, poly):
    """繞數 (winding number)；邊上的點算在內"""
    n = len(poly)
    wn = 0
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if _on_edge(p, a, b):
            return True
        if a[1] <= p[1] < b[1] and _cross(a, b, p) > 0:
            wn += 1
        elif b[1] <= p[1] < a[1] and _cross(a, b, p) < 0:
            wn -= 1
    return wn != 0


def _random_corridor(rng):
    """回傳 (多邊形, 中心線, 各頂點航向, 半寬)"""
    n = int(rng.integers(3, 9))
    heads = np.cumsum(rng.uniform(-0.3, 0.3, n))
    step = rng.uniform(4, 10)
    center = np.vstack([[0.0, 0.0], np.cumsum(np.stack([step * np.cos(heads), step * np.sin(heads)], 1), 0)])
    vh = np.concatenate([heads[:1], (heads[:-1] + heads[1:]) / 2, heads[-1:]])
    normal = np.stack([-np.sin(vh), np.cos(vh)], 1)
    half = rng.uniform(2.5, 5.0)
    poly = np.vstack([center - half * normal, (center + half * normal)[::-1]])
    return poly, center, vh, half


def _random_star(rng):
    n = int(rng.integers(3, 10))
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    r = rng.uniform(1, 5, n) if rng.random() < 0.5 else np.full(n, rng.uniform(1, 5))
    c = rng.uniform(-10, 10, 2)
    return np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], 1)


def _sample_points(rng, poly):
    lo, hi = poly.min(0) - 1.0, poly.max(0) + 1.0
    pts = [rng.uniform(lo, hi) for _ in range(4)]
    n = len(poly)
    for i in rng.choice(n, size=2, replace=False):
        a, b = poly[i], poly[(i + 1) % n]
        mid = (a + b) / 2
        nrm = np.array([a[1] - b[1], b[0] - a[0]]) / np.linalg.norm(b - a)
        pts += [a.copy(), mid, mid + 1e-4 * nrm, mid - 1e-4 * nrm]
    return pts


def test_point_in_polygon_agrees_with_winding_oracle():
    rng = np.random.default_rng(17)
    cases = 0
    while cases < 500:
        poly = _random_corridor(rng)[0] if cases % 2 else _random_star(rng)
        if abs(polygon_area(poly)) < 0.5 or not is_simple_polygon(poly):
            continue
        for p in _sample_points(rng, poly):
            assert point_in_polygon(p, poly) == _oracle_inside(p, poly), (poly.tolist(), p.tolist())
        cases += 1


@pytest.mark.slow
def test_offroad_agrees_with_winding_oracle():
    rng = np.random.default_rng(23)
    outcomes = {True: 0, False: 0}
    while sum(outcomes.values()) < 500:
        poly, center, vh, half = _random_corridor(rng)
        if not is_simple_polygon(poly):
            continue
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(center, axis=0), axis=1))])
        # 車尾與車頭都留在兩端封口內
        s = 3.0 + (arc[-1] - 6.0) * rng.uniform(0.2, 1.0) / 6.4 * _T
        poses = np.zeros((64, 4))
        heading = np.interp(s, arc, vh) + rng.normal(0, 0.1)
        offset = rng.uniform(-half, half)
        poses[:, 0] = np.interp(s, arc, center[:, 0]) - offset * np.sin(heading)
        poses[:, 1] = np.interp(s, arc, center[:, 1]) + offset * np.cos(heading)
        poses[:, 3] = heading
        expected = any(not _oracle_inside(c, poly)
                       for x, y, _, h in poses for c in _box(x, y, h, FP.length, FP.width))
        assert offroad_check(Trajectory(poses), FP, RoadBoundary(poly)) == expected
        outcomes[expected] += 1
    assert outcomes[True] >= 25 and outcomes[False] >= 25, outcomes
