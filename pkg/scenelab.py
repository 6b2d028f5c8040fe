# -*- coding: utf-8 -*-
"""
scenelab.py
-----------
合成場景、規則式 meta-action 自動標註、計畫擾動、計畫→軌跡解碼。

✔ 合成與解碼共用同一個運動學積分器，標註正確時解碼軌跡就貼近專家軌跡
✔ 標註器用 pandas rolling 做平滑，與特徵工程那套寫法一致
✔ 所有隨機性都由明確的 seed 推導，同樣輸入 → 同樣輸出
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from common import DataError, HORIZON_BINS, HISTORY_STEPS, DT, ROUTE_POINTS, ROUTE_SPACING, rng_for
from metaction import (
    LONGITUDINAL, LATERAL, LANE, GROUPS, VOCAB, MetaActionPlan,
    bin_timeline, timeline_from_bins,
)
from trajgeo import (
    Trajectory, History, Route, RoadBoundary, AgentTrack, VehicleFootprint, wrap_angle,
)

LANE_WIDTH = 3.5
DEFAULT_LABELS = {LONGITUDINAL: "Keep Speed", LATERAL: "Straight", LANE: "Keep Lane"}


class ScriptTooShort(DataError):
    pass


class UnknownSuite(DataError):
    pass


# ========== 1. 腳本與場景型別 ==========
@dataclass(frozen=True)
class ManeuverSegment:
    duration: float                    # 秒，0.1 s 格點
    long_mode: str = "accel"           # accel | stop | hold | reverse
    accel: float = 0.0                 # m/s²
    yaw_rate: float = 0.0              # rad/s，左正
    lane_shift: float = 0.0            # m，左正，本段內 smoothstep 完成
    labels: Tuple[Tuple[str, str], ...] = ()

    def label(self, group: str) -> str:
        return dict(self.labels).get(group, DEFAULT_LABELS[group])


@dataclass(frozen=True)
class AgentSpec:
    id: str
    x0: float
    y0: float
    speed: float
    heading: float = 0.0
    accel: float = 0.0
    shift: float = 0.0                 # 橫向位移 (m)，左正
    shift_start: float = 0.0
    shift_end: float = 0.0
    length: float = 4.6
    width: float = 1.8


@dataclass(frozen=True)
class ManeuverScript:
    name: str
    initial_speed: float
    segments: Tuple[ManeuverSegment, ...]
    agents: Tuple[AgentSpec, ...] = ()
    lanes_left: int = 0
    lanes_right: int = 0
    include_route: bool = True
    agent_jitter: float = 0.0          # m，依 seed 擾動 agent 起點
    odd_tag: str = "synthetic"


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    history: History
    expert_future: Trajectory
    boundary: RoadBoundary
    gt_plan: MetaActionPlan
    route: Optional[Route] = None
    agents: Tuple[AgentTrack, ...] = ()
    odd_tag: str = "synthetic"
    split: str = "train"

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.id == other.id and self.history == other.history
                and self.expert_future == other.expert_future and self.boundary == other.boundary
                and self.gt_plan == other.gt_plan and self.route == other.route
                and tuple(self.agents) == tuple(other.agents) and self.odd_tag == other.odd_tag
                and self.split == other.split)


@dataclass(frozen=True)
class LabelerConfig:
    accel_threshold: float = 0.5
    wait_speed: float = 0.3
    reverse_speed: float = 0.1
    turn_threshold: float = 0.15
    turn_window: float = 1.0
    lane_shift: float = 1.75
    lane_motion: float = 0.1
    smoothing_window: float = 0.5
    min_segment: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise DataError(f"labeler {name} must be positive")
        for name in ("turn_window", "smoothing_window", "min_segment"):
            v = getattr(self, name)
            if abs(v * 10 - round(v * 10)) > 1e-6:
                raise DataError(f"labeler {name} must be on the 0.1 s grid")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "LabelerConfig":
        d = d or {}
        return cls(**{k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class DecoderConfig:
    """標籤 → 控制量對照表"""
    accelerate: float = 1.5
    decelerate: float = -2.0
    reverse_speed: float = -1.0
    turn_rate: float = 0.25
    lane_shift: float = LANE_WIDTH


# ========== 2. 運動學積分 ==========
def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return 3 * s ** 2 - 2 * s ** 3


def lane_offsets(spans) -> np.ndarray:
    """spans: [(start_bin, end_bin, signed_shift)] → 65 個 (t=0..6.4) 橫向偏移"""
    j = np.arange(HORIZON_BINS + 1, dtype=float)
    out = np.zeros(HORIZON_BINS + 1)
    for s, e, shift in spans:
        out += shift * smoothstep((j - s) / max(e - s, 1))
    return out


def integrate_kinematics(v0: float, long_ctrl, yaw_rates, offsets) -> np.ndarray:
    """
    逐 bin 積分：long_ctrl[k] = (kind, value)，kind ∈ accel | wait | reverse。
    煞車 (a<0 且 v>=0) 停在 0，不會倒車。回傳 (64, 4) 姿態。
    """
    n = HORIZON_BINS
    base = np.zeros((n + 1, 2))
    psi = np.zeros(n + 1)
    arc = np.zeros(n + 1)
    v = float(v0)
    for k in range(n):
        kind, value = long_ctrl[k]
        r = float(yaw_rates[k])
        if kind == "wait":
            v, dist, v_next = 0.0, 0.0, 0.0
        elif kind == "reverse":
            v = v_next = float(value)
            dist = v * DT
        else:
            a = float(value)
            v_next = v + a * DT
            if a < 0 <= v and v_next < 0:
                dist = v * v / (2 * -a)
                v_next = 0.0
            else:
                dist = v * DT + 0.5 * a * DT * DT
        mid = psi[k] + 0.5 * r * DT
        base[k + 1] = base[k] + dist * np.array([math.cos(mid), math.sin(mid)])
        psi[k + 1] = psi[k] + r * DT
        arc[k + 1] = arc[k] + dist
        v = v_next
    normal = np.stack([-np.sin(psi), np.cos(psi)], axis=1)
    pts = base + offsets[:, None] * normal
    heading = psi.copy()
    for j in range(1, n + 1):
        lo, hi = j - 1, min(j + 1, n)
        ds = arc[hi] - arc[lo]
        if abs(ds) > 1e-6:
            heading[j] = psi[j] + math.atan((offsets[hi] - offsets[lo]) / ds)
    poses = np.zeros((n, 4))
    poses[:, :2] = pts[1:]
    poses[:, 3] = wrap_angle(heading[1:])
    return poses


def _history_poses(v0: float) -> np.ndarray:
    t = -DT * np.arange(HISTORY_STEPS, 0, -1)
    poses = np.zeros((HISTORY_STEPS, 4))
    poses[:, 0] = v0 * t
    return poses


def _centerline(poses: np.ndarray) -> np.ndarray:
    """未來路徑 (不含車道偏移時即路線) 的弧長取樣點，延伸到 80 m"""
    pts = np.vstack([[0.0, 0.0], poses[:, :2]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-9])
    pts = pts[keep]
    arc = np.concatenate([[0.0], np.cumsum(seg[seg > 1e-9])])
    if len(pts) >= 2:
        tail = pts[-1] - pts[-2]
        end_dir = tail / np.linalg.norm(tail)
    else:
        end_dir = np.array([1.0, 0.0])
    targets = ROUTE_SPACING * np.arange(1, ROUTE_POINTS + 1)
    out = np.zeros((ROUTE_POINTS, 2))
    for i, s in enumerate(targets):
        if s <= arc[-1]:
            out[i, 0] = np.interp(s, arc, pts[:, 0])
            out[i, 1] = np.interp(s, arc, pts[:, 1])
        else:
            out[i] = pts[-1] + (s - arc[-1]) * end_dir
    return out


def _route_from_base(base_poses: np.ndarray) -> Route:
    """弧長等距取點後再以弦長重新等距，保證相鄰 4 m"""
    rough = _centerline(base_poses)
    pts = [np.zeros(2)]
    dense = np.vstack([[0.0, 0.0], rough])
    # 沿粗路線以弦長 4 m 逐點前進
    seg_i, cur = 0, np.zeros(2)
    for _ in range(ROUTE_POINTS):
        while True:
            far = dense[min(seg_i + 1, len(dense) - 1)]
            if np.linalg.norm(far - cur) >= ROUTE_SPACING or seg_i + 1 >= len(dense) - 1:
                break
            seg_i += 1
        a, b = dense[seg_i], dense[min(seg_i + 1, len(dense) - 1)]
        # 在線段 a→b 上找與 cur 距離 4 m 的點
        d = b - a
        f = a - cur
        qa, qb, qc = d @ d, 2 * f @ d, f @ f - ROUTE_SPACING ** 2
        if qa < 1e-12:
            nxt = cur + ROUTE_SPACING * (d / (np.linalg.norm(d) + 1e-12))
        else:
            disc = max(qb * qb - 4 * qa * qc, 0.0)
            t = (-qb + math.sqrt(disc)) / (2 * qa)
            nxt = a + t * d
        pts.append(nxt)
        cur = nxt
    return Route(np.array(pts[1:]))


def _boundary_from_centerline(center: np.ndarray, left: float, right: float) -> RoadBoundary:
    """沿中心線左右平移出走廊多邊形，後方延伸 30 m，前方延伸 40 m (快車 6.4 s 會跑出 80 m 路線)"""
    first_dir = center[1] - center[0]
    first_dir = first_dir / np.linalg.norm(first_dir)
    last_dir = center[-1] - center[-2]
    last_dir = last_dir / np.linalg.norm(last_dir)
    line = np.vstack([center[0] - 30.0 * first_dir, center, center[-1] + 40.0 * last_dir])
    dirs = np.gradient(line, axis=0)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)
    left_edge = line + left * normals
    right_edge = line - right * normals
    return RoadBoundary(np.vstack([right_edge, left_edge[::-1]]))


# ========== 3. 合成場景 ==========
def _script_bins(script: ManeuverScript):
    """把腳本展開成每個 bin 的控制量與標籤"""
    total = sum(s.duration for s in script.segments)
    if total < HORIZON_BINS * DT - 1e-9:
        raise ScriptTooShort(f"script {script.name} covers {total:.1f}s, needs {HORIZON_BINS * DT:.1f}s")
    long_ctrl, yaw, labels = [], [], {g: [] for g in GROUPS}
    lane_spans = []
    start = 0
    for seg in script.segments:
        n = int(round(seg.duration * 10))
        if abs(seg.duration * 10 - n) > 1e-6 or n <= 0:
            raise DataError(f"script {script.name}: segment duration {seg.duration} is not on the 0.1 s grid")
        if not all(math.isfinite(v) for v in (seg.accel, seg.yaw_rate, seg.lane_shift)):
            raise DataError(f"script {script.name}: non-finite profile")
        for _ in range(n):
            if seg.long_mode == "hold":
                long_ctrl.append(("wait", 0.0))
            elif seg.long_mode == "reverse":
                long_ctrl.append(("reverse", seg.accel or -1.0))
            else:
                long_ctrl.append(("accel", seg.accel))
            yaw.append(seg.yaw_rate)
            for g in GROUPS:
                labels[g].append(seg.label(g))
        if seg.lane_shift:
            lane_spans.append((start, start + n, seg.lane_shift))
        start += n
    cut = HORIZON_BINS
    return long_ctrl[:cut], np.array(yaw[:cut]), {g: v[:cut] for g, v in labels.items()}, \
        [(s, min(e, cut), sh) for s, e, sh in lane_spans if s < cut]


def _agent_track(spec: AgentSpec, jitter: np.ndarray) -> AgentTrack:
    t = DT * np.arange(1, HORIZON_BINS + 1)
    v = spec.speed + spec.accel * t
    along = spec.speed * t + 0.5 * spec.accel * t * t
    if spec.accel < 0 < spec.speed:
        # 減速到 0 後停住
        t_stop = spec.speed / -spec.accel
        along = np.where(t < t_stop, along, spec.speed * t_stop / 2)
        v = np.maximum(v, 0.0)
    span = max(spec.shift_end - spec.shift_start, DT)
    lateral = spec.shift * smoothstep((t - spec.shift_start) / span)
    c, s = math.cos(spec.heading), math.sin(spec.heading)
    x = spec.x0 + jitter[0] + along * c - lateral * s
    y = spec.y0 + jitter[1] + along * s + lateral * c
    poses = np.zeros((HORIZON_BINS, 4))
    poses[:, 0], poses[:, 1] = x, y
    dlat = np.gradient(lateral, DT)
    poses[:, 3] = spec.heading + np.arctan2(dlat, np.maximum(np.abs(v), 1e-3))
    return AgentTrack(spec.id, VehicleFootprint(spec.length, spec.width), Trajectory(poses))


def synth_scene(script: ManeuverScript, seed: int) -> Scene:
    long_ctrl, yaw, labels, lane_spans = _script_bins(script)
    rng = rng_for("synth", script.name, seed)
    expert = integrate_kinematics(script.initial_speed, long_ctrl, yaw, lane_offsets(lane_spans))
    base = integrate_kinematics(script.initial_speed, long_ctrl, yaw, np.zeros(HORIZON_BINS + 1))
    route = _route_from_base(base)
    center = route.polyline()
    boundary = _boundary_from_centerline(
        center, LANE_WIDTH / 2 + LANE_WIDTH * script.lanes_left, LANE_WIDTH / 2 + LANE_WIDTH * script.lanes_right)
    agents = tuple(
        _agent_track(spec, rng.normal(0.0, script.agent_jitter, 2) if script.agent_jitter > 0 else np.zeros(2))
        for spec in script.agents)
    gt = MetaActionPlan(**{g: timeline_from_bins(g, labels[g]) for g in GROUPS})
    return Scene(
        id=f"{script.name}-{seed}",
        history=History(_history_poses(script.initial_speed)),
        expert_future=Trajectory(expert),
        boundary=boundary,
        gt_plan=gt,
        route=route if script.include_route else None,
        agents=agents,
        odd_tag=script.odd_tag,
    )


# ========== 4. 規則式標註 ==========
def _absorb_short(labels: List[str], min_bins: int) -> List[str]:
    """短於 min_bins 的段併入較長的鄰段，平手往前併"""
    labels = list(labels)
    while True:
        spans = []
        start = 0
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                spans.append([start, i, labels[start]])
                start = i
        if len(spans) <= 1:
            return labels
        short = [k for k, s in enumerate(spans) if s[1] - s[0] < min_bins]
        if not short:
            return labels
        k = min(short, key=lambda idx: (spans[idx][1] - spans[idx][0], idx))
        prev_len = spans[k - 1][1] - spans[k - 1][0] if k > 0 else -1
        next_len = spans[k + 1][1] - spans[k + 1][0] if k + 1 < len(spans) else -1
        target = spans[k - 1][2] if prev_len >= next_len else spans[k + 1][2]
        for i in range(spans[k][0], spans[k][1]):
            labels[i] = target


def _signed_offsets(xy: np.ndarray, route: Optional[Route]) -> np.ndarray:
    """相對參考線的帶號橫向偏移 (左正)；無路線時用 t=0 車頭方向線 (x 軸)"""
    if route is None:
        return xy[:, 1].copy()
    line = route.polyline()
    out = np.zeros(len(xy))
    for i, p in enumerate(xy):
        best = None
        for j in range(len(line) - 1):
            a, b = line[j], line[j + 1]
            ab = b - a
            t = (p - a) @ ab / (ab @ ab)
            if j < len(line) - 2:
                t = min(t, 1.0)
            if j > 0:
                t = max(t, 0.0)
            foot = a + t * ab
            d = float(np.linalg.norm(p - foot))
            if best is None or d < best[0]:
                cross = ab[0] * (p - a)[1] - ab[1] * (p - a)[0]
                best = (d, math.copysign(d, cross) if d > 0 else 0.0)
        out[i] = best[1]
    return out


def label_scene(traj: Trajectory, history: History, route: Optional[Route] = None,
                cfg: LabelerConfig = None) -> MetaActionPlan:
    cfg = cfg or LabelerConfig()
    seq = np.vstack([history.poses, np.zeros((1, 4)), traj.poses])   # 81 個姿態
    steps = np.diff(seq[:, :2], axis=0)                                # 80 步
    psi = np.unwrap(seq[:, 3])
    along = steps[:, 0] * np.cos(psi[:-1]) + steps[:, 1] * np.sin(psi[:-1])
    # 取到 1e-6，落在門檻上的速度才不會因浮點誤差左右搖擺
    speed = pd.Series(np.round(along / DT, 6))
    accel = pd.Series(np.gradient(speed.to_numpy(), DT))
    smooth_n = int(round(cfg.smoothing_window / DT))
    accel_s = accel.rolling(window=smooth_n, center=True, min_periods=1).mean()
    turn_n = int(round(cfg.turn_window / DT))
    dpsi = pd.Series(np.diff(psi))
    # 奇數視窗才會以 bin 為中心對稱
    turn = dpsi.rolling(window=turn_n | 1, center=True, min_periods=1).mean() * turn_n

    off = HISTORY_STEPS  # 第 16 步起為未來 bin
    lon, lat = [], []
    for i in range(HORIZON_BINS):
        v, a, dh = speed.iloc[off + i], accel_s.iloc[off + i], turn.iloc[off + i]
        if abs(v) < cfg.wait_speed:
            lon.append("Wait")
        elif v < -cfg.reverse_speed:
            lon.append("Reverse")
        elif a > cfg.accel_threshold:
            lon.append("Accelerate")
        elif a < -cfg.accel_threshold:
            lon.append("Decelerate")
        else:
            lon.append("Keep Speed")
        lat.append("Left Turn" if dh > cfg.turn_threshold else ("Right Turn" if dh < -cfg.turn_threshold else "Straight"))

    # 車道：偏移越過半車道即為一次換道，前後延伸到橫向速度消失為止
    offsets = _signed_offsets(np.vstack([[0.0, 0.0], traj.xy]), route)
    lat_vel = np.diff(offsets) / DT
    lane = ["Keep Lane"] * HORIZON_BINS
    center = offsets[0]
    for j in range(1, HORIZON_BINS + 1):
        rel = offsets[j] - center
        if abs(rel) <= cfg.lane_shift:
            continue
        direction = 1.0 if rel > 0 else -1.0
        center += direction * 2 * cfg.lane_shift
        label = "Left Lane Change" if direction > 0 else "Right Lane Change"
        lo = hi = j - 1
        while lo - 1 >= 0 and lat_vel[lo - 1] * direction > cfg.lane_motion:
            lo -= 1
        while hi + 1 < HORIZON_BINS and lat_vel[hi + 1] * direction > cfg.lane_motion:
            hi += 1
        for i in range(lo, hi + 1):
            lane[i] = label

    min_bins = int(round(cfg.min_segment / DT))
    return MetaActionPlan(
        longitudinal=timeline_from_bins(LONGITUDINAL, _absorb_short(lon, min_bins)),
        lateral=timeline_from_bins(LATERAL, _absorb_short(lat, min_bins)),
        lane=timeline_from_bins(LANE, _absorb_short(lane, min_bins)),
    )


# ========== 5. 計畫擾動 ==========
MAX_EDITS = 200


def _perturb_bins(group: str, orig: List[str], rng: np.random.Generator, strength: float) -> List[str]:
    target = int(round(strength * HORIZON_BINS))
    bins = list(orig)
    vocab = VOCAB[group]
    for _ in range(MAX_EDITS):
        changed = [a != b for a, b in zip(bins, orig)]
        need = target - sum(changed)
        if need <= 0:
            break
        spans = timeline_from_bins(group, bins).segments
        ops = ["substitute"]
        if len(spans) >= 2:
            ops += ["shift"]
            if any(s.duration <= need for s in spans):
                ops += ["delete"]
        op = ops[int(rng.integers(len(ops)))]
        if op == "substitute":
            # 從尚未改動的 bin 開一段長度 need 的區間換成別的標籤
            free = [i for i, c in enumerate(changed) if not c]
            start = free[int(rng.integers(len(free)))]
            choices = [l for l in vocab if l != orig[start]]
            new = choices[int(rng.integers(len(choices)))]
            for i in range(start, min(start + need, HORIZON_BINS)):
                bins[i] = new
        elif op == "shift":
            k = int(rng.integers(1, len(spans)))
            delta = int(rng.integers(2, 9)) * (1 if rng.random() < 0.5 else -1)
            lo, hi = spans[k - 1].start + 1, spans[k].end - 1
            new_b = int(np.clip(spans[k].start + delta, lo, hi))
            if new_b < spans[k].start:
                for i in range(new_b, spans[k].start):
                    bins[i] = spans[k].label
            else:
                for i in range(spans[k].start, new_b):
                    bins[i] = spans[k - 1].label
        else:
            cand = [k for k, s in enumerate(spans) if s.duration <= need]
            k = cand[int(rng.integers(len(cand)))]
            if k == 0:
                fill = spans[1].label
            elif k == len(spans) - 1:
                fill = spans[k - 1].label
            else:
                fill = spans[k - 1].label if rng.random() < 0.5 else spans[k + 1].label
            for i in range(spans[k].start, spans[k].end):
                bins[i] = fill
    return bins


def perturb_plan(plan: MetaActionPlan, seed: int, strength: float) -> MetaActionPlan:
    if not 0.0 <= strength <= 1.0:
        raise DataError(f"perturbation strength {strength} outside [0, 1]")
    if strength == 0:
        return plan
    rng = rng_for("perturb", seed)
    out = {}
    for g in plan.present_groups():
        out[g] = timeline_from_bins(g, _perturb_bins(g, bin_timeline(plan.get(g)), rng, strength))
    return MetaActionPlan(**out)


# ========== 6. 計畫 → 軌跡 ==========
def plan_controls(plan: MetaActionPlan, cfg: DecoderConfig = None):
    cfg = cfg or DecoderConfig()
    bins = {g: (bin_timeline(plan.get(g)) if plan.get(g) is not None else [DEFAULT_LABELS[g]] * HORIZON_BINS)
            for g in GROUPS}
    long_table = {
        "Accelerate": ("accel", cfg.accelerate),
        "Decelerate": ("accel", cfg.decelerate),
        "Keep Speed": ("accel", 0.0),
        "Wait": ("wait", 0.0),
        "Reverse": ("reverse", cfg.reverse_speed),
    }
    yaw_table = {"Straight": 0.0, "Left Turn": cfg.turn_rate, "Right Turn": -cfg.turn_rate}
    long_ctrl = [long_table[l] for l in bins[LONGITUDINAL]]
    yaw = np.array([yaw_table[l] for l in bins[LATERAL]])
    spans = []
    lane_tl = timeline_from_bins(LANE, bins[LANE])
    for s in lane_tl.segments:
        if s.label == "Left Lane Change":
            spans.append((s.start, s.end, cfg.lane_shift))
        elif s.label == "Right Lane Change":
            spans.append((s.start, s.end, -cfg.lane_shift))
    return long_ctrl, yaw, lane_offsets(spans)


def decode_plan_to_traj(plan: MetaActionPlan, history: History, seed: int, noise: float = 0.0,
                        cfg: DecoderConfig = None) -> Trajectory:
    long_ctrl, yaw, offsets = plan_controls(plan, cfg)
    poses = integrate_kinematics(history.terminal_speed(), long_ctrl, yaw, offsets)
    if noise > 0:
        poses[:, :2] += rng_for("decode", seed).normal(0.0, noise, (HORIZON_BINS, 2))
    return Trajectory(poses)


# ========== 7. 腳本組 (synth 子命令用) ==========
def _seg(duration, mode="accel", accel=0.0, yaw=0.0, shift=0.0, **labels):
    key = {"lon": LONGITUDINAL, "lat": LATERAL, "lane": LANE}
    return ManeuverSegment(round(duration, 1), mode, accel, yaw, shift,
                           tuple((key[k], v) for k, v in labels.items()))


def _pick(rng, lo, hi):
    """0.1 格點上的均勻取樣"""
    return round(float(rng.integers(int(round(lo * 10)), int(round(hi * 10)) + 1)) / 10, 1)


def _straight(i, rng):
    v0 = _pick(rng, 8.0, 15.0)
    lead = AgentSpec("lead", 40.0 + _pick(rng, 0, 10), 0.0, v0)
    return ManeuverScript(f"straight-{i:04d}", v0, (_seg(6.4),), agents=(lead,), odd_tag="straight")


def _following(i, rng):
    v0 = _pick(rng, 10.0, 14.0)
    t1, t2 = _pick(rng, 1.0, 2.5), _pick(rng, 1.5, 2.5)
    if rng.random() < 0.5:
        mid = _seg(t2, accel=1.5, lon="Accelerate")
        lead_v = v0 + 1.5 * t2
    else:
        mid = _seg(t2, accel=-2.0, lon="Decelerate")
        lead_v = v0 - 2.0 * t2
    lead = AgentSpec("lead", 30.0 + _pick(rng, 0, 10), 0.0, max(lead_v, 1.0))
    return ManeuverScript(f"following-{i:04d}", v0, (_seg(t1), mid, _seg(6.4 - t1 - t2)),
                          agents=(lead,), odd_tag="following")


def _lane_change(i, rng):
    v0 = _pick(rng, 13.0, 16.0)
    t1 = _pick(rng, 0.5, 1.5)
    left = rng.random() < 0.5
    shift = LANE_WIDTH if left else -LANE_WIDTH
    label = "Left Lane Change" if left else "Right Lane Change"
    side = AgentSpec("side", -15.0, -shift, v0 - 1.0)
    return ManeuverScript(f"lane-change-{i:04d}", v0,
                          (_seg(t1), _seg(4.0, shift=shift, lane=label), _seg(6.4 - t1 - 4.0)),
                          agents=(side,), lanes_left=int(left), lanes_right=int(not left),
                          odd_tag="lane-change")


def _turn(i, rng):
    v0 = _pick(rng, 6.0, 9.0)
    t1, t2 = _pick(rng, 0.5, 2.0), _pick(rng, 2.0, 3.0)
    left = rng.random() < 0.5
    yaw = 0.25 if left else -0.25
    label = "Left Turn" if left else "Right Turn"
    return ManeuverScript(f"turn-{i:04d}", v0,
                          (_seg(t1), _seg(t2, yaw=yaw, lat=label), _seg(6.4 - t1 - t2)),
                          odd_tag="turn")


def _vru_stop(i, rng):
    t_stop = _pick(rng, 2.0, 3.5)
    v0 = 2.0 * t_stop
    t1 = _pick(rng, 0.5, 1.0)
    stop_x = v0 * t1 + v0 * v0 / 4.0
    ped = AgentSpec("ped", stop_x + 6.0, -4.0, 1.2, heading=math.pi / 2, length=0.6, width=0.6)
    return ManeuverScript(f"vru-stop-{i:04d}", v0,
                          (_seg(t1), _seg(t_stop, accel=-2.0, lon="Decelerate"),
                           _seg(6.4 - t1 - t_stop, mode="hold", lon="Wait")),
                          agents=(ped,), odd_tag="vru-stop")


def _cut_in(i, rng):
    v0 = _pick(rng, 10.0, 14.0)
    t1, t2 = _pick(rng, 0.5, 1.5), _pick(rng, 1.5, 2.0)
    cutter = AgentSpec("cut-in", 18.0 + _pick(rng, 0, 4), LANE_WIDTH, v0 - 2.0,
                       shift=-LANE_WIDTH, shift_start=1.0, shift_end=3.0)
    return ManeuverScript(f"cut-in-{i:04d}", v0,
                          (_seg(t1), _seg(t2, accel=-2.0, lon="Decelerate"), _seg(6.4 - t1 - t2)),
                          agents=(cutter,), lanes_left=1, odd_tag="cut-in")


SUITES = {
    "straight": [_straight],
    "following": [_following],
    "lane-change": [_lane_change],
    "turn": [_turn],
    "vru-stop": [_vru_stop],
    "cut-in": [_cut_in],
    "mixed": [_following, _lane_change, _turn, _vru_stop, _cut_in, _straight],
}


def suite_scripts(suite: str, n: int, seed: int) -> List[ManeuverScript]:
    if suite not in SUITES:
        raise UnknownSuite(f"unknown script suite {suite!r} (choose from {', '.join(SUITES)})")
    builders = SUITES[suite]
    out = []
    for i in range(n):
        rng = rng_for("suite", suite, seed, i)
        out.append(builders[i % len(builders)](i, rng))
    return out


def synth_suite(suite: str, n: int, seed: int, val_fraction: float = 0.0) -> List[Scene]:
    """依 seed 產生 n 個場景；val_fraction 依 (seed, 場景 id) 決定性地劃出 D_val"""
    scenes = []
    for script in suite_scripts(suite, n, seed):
        scene = synth_scene(script, seed)
        if val_fraction > 0 and rng_for("split", seed, scene.id).random() < val_fraction:
            scene = replace(scene, split="val")
        scenes.append(scene)
    return scenes
