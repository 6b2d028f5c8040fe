# -*- coding: utf-8 -*-
"""
trajgeo.py
----------
軌跡容器與評估指標：ADE/FDE (min/avg)、車角距離、碰撞、出界。

✔ 位移類指標只看平面 (x, y)，z 只存不算
✔ 碰撞：10 Hz 每步膨脹框先粗篩，命中後在前後一步內以 100 Hz 內插確認
✔ 出界：任一車角「嚴格」落在可行駛多邊形外才算，邊界上算在內
"""

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from common import DataError, HORIZON_BINS, HISTORY_STEPS, DT, ROUTE_POINTS, ROUTE_SPACING


# ========== 1. 錯誤類別 ==========
class GeometryError(DataError):
    pass


class LengthMismatch(GeometryError):
    pass


class EmptySet(GeometryError):
    pass


class ClockMismatch(GeometryError):
    pass


class EmptyCorpus(GeometryError):
    pass


class InvalidPolygon(GeometryError):
    pass


class InvalidTrajectory(GeometryError):
    pass


def wrap_angle(a):
    """角度包到 (-π, π]"""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


# ========== 2. 資料型別 ==========
@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidTrajectory("pose values must be finite")
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))


def _as_pose_array(poses, expected: Optional[int], what: str) -> np.ndarray:
    arr = np.array(poses, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidTrajectory(f"{what} must be an N×4 array of (x, y, z, heading)")
    if expected is not None and arr.shape[0] != expected:
        raise LengthMismatch(f"{what} needs exactly {expected} poses, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidTrajectory(f"{what} contains non-finite values")
    arr[:, 3] = wrap_angle(arr[:, 3])
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """64 個 10 Hz 未來姿態，覆蓋 (0, 6.4] s，ego 在 t=0 的座標系"""
    poses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "poses", _as_pose_array(self.poses, HORIZON_BINS, "trajectory"))

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def heading(self) -> np.ndarray:
        return self.poses[:, 3]

    def __len__(self):
        return self.poses.shape[0]

    def __eq__(self, other):
        return isinstance(other, Trajectory) and np.array_equal(self.poses, other.poses)

    def __hash__(self):
        return hash(self.poses.tobytes())

    def pose(self, i: int) -> Pose:
        return Pose(*self.poses[i])


@dataclass(frozen=True, eq=False)
class History:
    """16 個歷史姿態，覆蓋 [-1.6, 0) s"""
    poses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "poses", _as_pose_array(self.poses, HISTORY_STEPS, "history"))

    def __eq__(self, other):
        return isinstance(other, History) and np.array_equal(self.poses, other.poses)

    def __hash__(self):
        return hash(self.poses.tobytes())

    def terminal_speed(self) -> float:
        """最後一步 (t=-0.1 → t=0 原點) 的帶號沿車頭速度"""
        # t=0 時車頭朝 +x，原點減去最後一個歷史點後取 x 分量
        return float(-self.poses[-1, 0]) / DT


@dataclass(frozen=True)
class TrajectorySet:
    modes: tuple

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise EmptySet("trajectory set is empty")
        n = len(modes[0])
        if any(len(m) != n for m in modes):
            raise LengthMismatch("all modes of a set must share one length")
        object.__setattr__(self, "modes", modes)

    def __len__(self):
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)


@dataclass(frozen=True, eq=False)
class Route:
    """20 個等距 (4 m) 平面路徑點，覆蓋前方 80 m"""
    waypoints: np.ndarray

    def __post_init__(self):
        pts = np.array(self.waypoints, dtype=float)
        if pts.shape != (ROUTE_POINTS, 2) or not np.all(np.isfinite(pts)):
            raise InvalidTrajectory(f"route needs exactly {ROUTE_POINTS} finite (x, y) points")
        gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(np.abs(gaps - ROUTE_SPACING) > 0.01 * ROUTE_SPACING):
            raise InvalidTrajectory(f"route spacing must be {ROUTE_SPACING} m ± 1%")
        pts.setflags(write=False)
        object.__setattr__(self, "waypoints", pts)

    def __eq__(self, other):
        return isinstance(other, Route) and np.array_equal(self.waypoints, other.waypoints)

    def polyline(self) -> np.ndarray:
        """由原點出發的參考折線"""
        return np.vstack([[0.0, 0.0], self.waypoints])


@dataclass(frozen=True)
class VehicleFootprint:
    length: float = 4.6
    width: float = 1.8

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise GeometryError("footprint length and width must be > 0")


@dataclass(frozen=True)
class AgentTrack:
    id: str
    footprint: VehicleFootprint
    trajectory: Trajectory


@dataclass(frozen=True, eq=False)
class RoadBoundary:
    """可行駛區域：單一簡單多邊形 (ego 座標系)"""
    polygon: np.ndarray

    def __post_init__(self):
        pts = np.array(self.polygon, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise InvalidPolygon("boundary must be a list of finite (x, y) vertices")
        if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
            pts = pts[:-1]
        if len(pts) < 3:
            raise InvalidPolygon("boundary needs at least 3 vertices")
        if abs(polygon_area(pts)) <= 1e-9:
            raise InvalidPolygon("boundary polygon has zero area")
        if not is_simple_polygon(pts):
            raise InvalidPolygon("boundary polygon self-intersects")
        pts.setflags(write=False)
        object.__setattr__(self, "polygon", pts)

    def __eq__(self, other):
        return isinstance(other, RoadBoundary) and np.array_equal(self.polygon, other.polygon)


@dataclass
class MetricsRow:
    min_ade: float
    avg_ade: float
    min_fde: float
    avg_fde: float
    corner_distance: float
    collision_rate: float
    offroad_rate: float
    iou: Optional[float] = None
    init_iou: Optional[float] = None
    extra: dict = field(default_factory=dict)


class SetMetrics(NamedTuple):
    min_ade: float
    avg_ade: float
    min_fde: float
    avg_fde: float
    best_mode: int


# ========== 3. 位移指標 ==========
def _check_lengths(pred, ref):
    if len(pred) != len(ref):
        raise LengthMismatch(f"trajectory lengths differ ({len(pred)} vs {len(ref)})")


def ade(pred: Trajectory, ref: Trajectory) -> float:
    _check_lengths(pred, ref)
    return float(np.linalg.norm(pred.xy - ref.xy, axis=1).mean())


def fde(pred: Trajectory, ref: Trajectory) -> float:
    _check_lengths(pred, ref)
    return float(np.linalg.norm(pred.xy[-1] - ref.xy[-1]))


def set_metrics(traj_set: TrajectorySet, ref: Trajectory) -> SetMetrics:
    if traj_set is None or len(traj_set) == 0:
        raise EmptySet("trajectory set is empty")
    ades = [ade(m, ref) for m in traj_set]
    fdes = [fde(m, ref) for m in traj_set]
    best = int(np.argmin(ades))
    return SetMetrics(float(min(ades)), float(np.mean(ades)), float(min(fdes)), float(np.mean(fdes)), best)


def min_ade(traj_set: TrajectorySet, ref: Trajectory) -> float:
    return set_metrics(traj_set, ref).min_ade


# ========== 4. 車角距離 ==========
# 車角順序：左前、右前、右後、左後
_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


def corner_keypoints(pose: Pose, footprint: VehicleFootprint) -> np.ndarray:
    return _corners(pose.x, pose.y, pose.heading, footprint.length, footprint.width)


def _corners(x, y, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    half = _CORNER_SIGNS * np.array([length / 2, width / 2])
    return (rot @ half.T).T + np.array([x, y])


def trajectory_corners(traj: Trajectory, footprint: VehicleFootprint) -> np.ndarray:
    """(N, 4, 2) 每步四個車角"""
    c, s = np.cos(traj.heading), np.sin(traj.heading)
    half = _CORNER_SIGNS * np.array([footprint.length / 2, footprint.width / 2])
    cx = c[:, None] * half[None, :, 0] - s[:, None] * half[None, :, 1]
    cy = s[:, None] * half[None, :, 0] + c[:, None] * half[None, :, 1]
    return np.stack([cx + traj.xy[:, :1], cy + traj.xy[:, 1:2]], axis=-1)


def corner_distance(pred: Trajectory, ref: Trajectory, footprint: VehicleFootprint) -> float:
    _check_lengths(pred, ref)
    diff = trajectory_corners(pred, footprint) - trajectory_corners(ref, footprint)
    return float(np.linalg.norm(diff, axis=-1).mean())


def set_corner_distance(traj_set: TrajectorySet, ref: Trajectory, footprint: VehicleFootprint) -> float:
    """集合層級：取 minADE 那個 mode 計算"""
    best = set_metrics(traj_set, ref).best_mode
    return corner_distance(traj_set.modes[best], ref, footprint)


# ========== 5. 碰撞 (SAT) ==========
def boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """兩個凸四邊形的分離軸測試，接觸也算重疊"""
    for corners in (a, b):
        for i in range(len(corners)):
            edge = corners[(i + 1) % len(corners)] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _step_sweep(poses: np.ndarray, origin: Optional[np.ndarray]) -> np.ndarray:
    """每個取樣點前後兩步中較大的 (位移, 轉角)，回傳 (N, 2)"""
    xy, hd = poses[:, :2], poses[:, 3]
    if origin is not None:
        xy = np.vstack([origin, xy])
        hd = np.concatenate([hd[:1], hd])
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    turns = np.abs(wrap_angle(np.diff(hd)))
    sweep = np.stack([steps, np.atleast_1d(turns)], axis=1)
    if origin is None:
        sweep = np.vstack([sweep[:1], sweep])
    after = np.vstack([sweep[1:], sweep[-1:]])
    return np.maximum(sweep, after)


def _swept_box(pose, fp, sweep) -> np.ndarray:
    """粗篩用外擴框：四周各加一步位移與車角轉動的距離 (不分方向)"""
    pad = sweep[0] + math.hypot(fp.length, fp.width) / 2 * min(sweep[1], math.pi)
    return _corners(pose[0], pose[1], pose[3], fp.length + 2 * pad, fp.width + 2 * pad)


def _interp_pose(poses: np.ndarray, origin_pose: Optional[np.ndarray], t: float) -> np.ndarray:
    """t (秒) 時的線性內插姿態；poses[i] 對應 t = (i+1)·DT"""
    pts = poses if origin_pose is None else np.vstack([origin_pose, poses])
    t0 = DT if origin_pose is None else 0.0
    pos = (t - t0) / DT
    i = int(np.clip(math.floor(pos + 1e-9), 0, len(pts) - 2))
    f = float(np.clip(pos - i, 0.0, 1.0))
    p0, p1 = pts[i], pts[i + 1]
    dh = float(wrap_angle(p1[3] - p0[3]))
    return np.array([p0[0] + f * (p1[0] - p0[0]), p0[1] + f * (p1[1] - p0[1]), 0.0, p0[3] + f * dh])


DENSE_SUBSTEPS = 10


def _confirm_dense(ego: Trajectory, ego_fp, agent: AgentTrack, k: int, window: float) -> bool:
    """在第 k 步前後一步內以 100 Hz 內插確認 (不膨脹)"""
    t_lo = max(DT, (k) * DT)
    t_hi = min(window, (k + 2) * DT)
    n = int(round((t_hi - t_lo) / DT * DENSE_SUBSTEPS))
    for j in range(n + 1):
        t = t_lo + j * DT / DENSE_SUBSTEPS
        if t > window + 1e-9:
            break
        e = _interp_pose(ego.poses, None, t)
        a = _interp_pose(agent.trajectory.poses, None, t)
        if boxes_overlap(_corners(e[0], e[1], e[3], ego_fp.length, ego_fp.width),
                         _corners(a[0], a[1], a[3], agent.footprint.length, agent.footprint.width)):
            return True
    return False


def collision_check(traj: Trajectory, ego_fp: VehicleFootprint, agents: Sequence[AgentTrack],
                    window: float = 5.0) -> bool:
    last = int(math.floor(window / DT + 1e-9))  # window 5.0 → 第 50 步
    last = min(last, len(traj))
    if last <= 0 or not agents:
        return False
    ego_sweep = _step_sweep(traj.poses, np.zeros(2))
    for agent in agents:
        if len(agent.trajectory) != len(traj):
            raise ClockMismatch(f"agent {agent.id} has {len(agent.trajectory)} samples, ego has {len(traj)}")
        ag_poses = np.asarray(agent.trajectory.poses)
        ag_sweep = _step_sweep(ag_poses, None)
        for k in range(last):
            ego_box = _swept_box(traj.poses[k], ego_fp, ego_sweep[k])
            ag_box = _swept_box(ag_poses[k], agent.footprint, ag_sweep[k])
            if boxes_overlap(ego_box, ag_box) and _confirm_dense(traj, ego_fp, agent, k, window):
                return True
    return False


def collision_rate(corpus, ego_fp: VehicleFootprint, window: float = 5.0, scene_level: bool = False) -> float:
    """corpus: [(TrajectorySet, agents), ...]；預設為 mode 彙總比例，scene_level 則看每場景是否有任一 mode 碰撞"""
    hits = total = 0
    for traj_set, agents in corpus:
        flags = [collision_check(m, ego_fp, agents, window) for m in traj_set]
        if scene_level:
            hits += int(any(flags))
            total += 1
        else:
            hits += sum(flags)
            total += len(flags)
    if total == 0:
        raise EmptyCorpus("collision rate over an empty corpus")
    return hits / total


# ========== 6. 出界 ==========
def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2, o3, o4 = orient(p1, p2, q1), orient(p1, p2, q2), orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (o1 == 0 and on_seg(p1, p2, q1)) or (o2 == 0 and on_seg(p1, p2, q2)) or \
        (o3 == 0 and on_seg(q1, q2, p1)) or (o4 == 0 and on_seg(q1, q2, p2))


def is_simple_polygon(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # 相鄰邊共用頂點
            if _segments_intersect(a1, a2, poly[j], poly[(j + 1) % n]):
                return False
    return True


def _on_segment(pt, a, b, tol=1e-9) -> bool:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return float(np.linalg.norm(pt - a)) <= tol
    t = float(np.clip((pt - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(pt - (a + t * ab))) <= tol


def point_in_polygon(pt, poly: np.ndarray) -> bool:
    """射線奇偶測試；落在邊上視為在內"""
    pt = np.asarray(pt, dtype=float)
    n = len(poly)
    x, y = pt
    inside = False
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        if _on_segment(pt, a, b):
            return True
        if (a[1] > y) != (b[1] > y):
            x_cross = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x < x_cross:
                inside = not inside
    return inside


def offroad_check(traj: Trajectory, ego_fp: VehicleFootprint, boundary: RoadBoundary) -> bool:
    corners = trajectory_corners(traj, ego_fp).reshape(-1, 2)
    return any(not point_in_polygon(c, boundary.polygon) for c in corners)


def offroad_rate(corpus, ego_fp: VehicleFootprint) -> float:
    """corpus: [(TrajectorySet, RoadBoundary), ...]，mode 彙總比例"""
    hits = total = 0
    for traj_set, boundary in corpus:
        for m in traj_set:
            hits += int(offroad_check(m, ego_fp, boundary))
            total += 1
    if total == 0:
        raise EmptyCorpus("offroad rate over an empty corpus")
    return hits / total
