# -*- coding: utf-8 -*-
"""
metaction.py
------------
時間分段的 meta-action 計畫：定義、解析、輸出、分箱、IOU、差異比對。

時間單位一律為整數 decisecond (0.1 s)，6.4 s 地平線 = 64 個 bin。
文字格式 (每組可省略)：

- longitudinal
  - 0.0s-0.9s: Keep Speed
  - 0.9s-6.4s: Accelerate
- lateral
  - 0.0s-6.4s: Straight
"""

import re
from dataclasses import dataclass
from typing import Optional, List, Tuple, NamedTuple

from common import DataError, HORIZON_BINS

# ========== 1. 詞彙表 ==========
LONGITUDINAL, LATERAL, LANE = "longitudinal", "lateral", "lane"
GROUPS = (LONGITUDINAL, LATERAL, LANE)
VOCAB = {
    LONGITUDINAL: ("Accelerate", "Decelerate", "Keep Speed", "Wait", "Reverse"),
    LATERAL: ("Straight", "Left Turn", "Right Turn"),
    LANE: ("Keep Lane", "Left Lane Change", "Right Lane Change"),
}
ABSENT = "absent"
GRID_TOLERANCE = 0.01  # 秒


# ========== 2. 錯誤類別 ==========
class PlanError(DataError):
    pass


class UnknownGroup(PlanError):
    pass


class UnknownLabel(PlanError):
    def __init__(self, group: str, label: str):
        self.group = group
        self.label = label
        super().__init__(f"label {label!r} is not in the {group} vocabulary")


class GridViolation(PlanError):
    pass


class PartitionViolation(PlanError):
    pass


class EmptyPlan(PlanError):
    pass


class PlanSyntaxError(PlanError):
    pass


# ========== 3. 資料型別 ==========
@dataclass(frozen=True)
class TimeSegment:
    start: int
    end: int
    label: str

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class GroupTimeline:
    group: str
    segments: Tuple[TimeSegment, ...]

    def __post_init__(self):
        if self.group not in VOCAB:
            raise UnknownGroup(f"unknown group {self.group!r}")
        segs = tuple(self.segments)
        if not segs:
            raise PartitionViolation(f"{self.group}: no segments")
        for s in segs:
            if s.label not in VOCAB[self.group]:
                raise UnknownLabel(self.group, s.label)
        if segs[0].start != 0:
            raise PartitionViolation(f"{self.group}: first segment starts at {segs[0].start / 10:.1f}s, not 0.0s")
        prev_end = 0
        for s in segs:
            if s.start != prev_end:
                kind = "gap" if s.start > prev_end else "overlap"
                raise PartitionViolation(
                    f"{self.group}: {kind} at [{min(prev_end, s.start) / 10:.1f}s, {max(prev_end, s.start) / 10:.1f}s)")
            if s.end <= s.start:
                raise PartitionViolation(f"{self.group}: empty interval {s.start / 10:.1f}s-{s.end / 10:.1f}s")
            if s.end > HORIZON_BINS:
                raise PartitionViolation(f"{self.group}: segment ends past the {HORIZON_BINS / 10:.1f}s horizon")
            prev_end = s.end
        if prev_end != HORIZON_BINS:
            raise PartitionViolation(f"{self.group}: timeline ends at {prev_end / 10:.1f}s, not {HORIZON_BINS / 10:.1f}s")
        # 相鄰同標籤合併成唯一標準形
        merged = [segs[0]]
        for s in segs[1:]:
            if s.label == merged[-1].label:
                merged[-1] = TimeSegment(merged[-1].start, s.end, s.label)
            else:
                merged.append(s)
        object.__setattr__(self, "segments", tuple(merged))


@dataclass(frozen=True)
class MetaActionPlan:
    longitudinal: Optional[GroupTimeline] = None
    lateral: Optional[GroupTimeline] = None
    lane: Optional[GroupTimeline] = None

    def __post_init__(self):
        present = [g for g in GROUPS if getattr(self, g) is not None]
        if not present:
            raise EmptyPlan("a plan needs at least one group")
        for g in present:
            if getattr(self, g).group != g:
                raise UnknownGroup(f"timeline for {getattr(self, g).group!r} stored under {g!r}")

    def get(self, group: str) -> Optional[GroupTimeline]:
        return getattr(self, group)

    def present_groups(self) -> List[str]:
        return [g for g in GROUPS if getattr(self, g) is not None]


class PlanDiff(NamedTuple):
    group: str
    start: int
    end: int
    pred: str
    gt: str

    def interval_text(self) -> str:
        return f"[{self.start / 10:.1f}s,{self.end / 10:.1f}s)"


# ========== 4. 建構輔助 ==========
def make_timeline(group: str, spans) -> GroupTimeline:
    """spans: [(start_bin, end_bin, label), ...]"""
    return GroupTimeline(group, tuple(TimeSegment(int(s), int(e), l) for s, e, l in spans))


def make_plan(**groups) -> MetaActionPlan:
    """make_plan(lateral=[(0, 64, "Straight")]) 之類的簡寫"""
    kwargs = {}
    for g, spans in groups.items():
        if spans is None:
            continue
        if g not in VOCAB:
            raise UnknownGroup(f"unknown group {g!r}")
        kwargs[g] = spans if isinstance(spans, GroupTimeline) else make_timeline(g, spans)
    return MetaActionPlan(**kwargs)


def timeline_from_bins(group: str, bins) -> GroupTimeline:
    """64 格標籤陣列 → 標準形 timeline"""
    bins = list(bins)
    if len(bins) != HORIZON_BINS:
        raise PartitionViolation(f"{group}: expected {HORIZON_BINS} bins, got {len(bins)}")
    spans = []
    start = 0
    for i in range(1, HORIZON_BINS + 1):
        if i == HORIZON_BINS or bins[i] != bins[start]:
            spans.append((start, i, bins[start]))
            start = i
    return make_timeline(group, spans)


# ========== 5. 解析與輸出 ==========
_GROUP_LINE = re.compile(r"^-\s*([A-Za-z_][A-Za-z_ ]*?)\s*:?\s*$")
_SEGMENT_LINE = re.compile(r"^-\s*([-+]?[0-9]*\.?[0-9]+)\s*s?\s*-\s*([-+]?[0-9]*\.?[0-9]+)\s*s?\s*:\s*(.+?)\s*$")


def _snap(seconds: float, raw: str) -> int:
    bins = round(seconds * 10)
    if abs(seconds - bins / 10) > GRID_TOLERANCE + 1e-9:
        raise GridViolation(f"time {raw}s is not on the 0.1s grid")
    return int(bins)


def parse_plan(text: str) -> MetaActionPlan:
    """解析 bullet-point 計畫文字，回傳標準形 MetaActionPlan"""
    spans = {}
    current = None
    for raw_line in (text or "").splitlines():
        line = raw_line.strip()
        if not line:
            continue
        m = _SEGMENT_LINE.match(line)
        if m:
            if current is None:
                raise PlanSyntaxError(f"segment line before any group header: {line!r}")
            start, end = _snap(float(m.group(1)), m.group(1)), _snap(float(m.group(2)), m.group(2))
            label = m.group(3)
            if label not in VOCAB[current]:
                raise UnknownLabel(current, label)
            if start < 0 or end > HORIZON_BINS:
                raise PartitionViolation(f"{current}: {m.group(1)}s-{m.group(2)}s leaves the 0.0s-6.4s horizon")
            spans[current].append((start, end, label))
            continue
        m = _GROUP_LINE.match(line)
        if m:
            name = m.group(1).strip().lower()
            if name not in VOCAB:
                raise UnknownGroup(f"unknown group {m.group(1).strip()!r}")
            if name in spans:
                raise PartitionViolation(f"{name}: group listed twice")
            spans[name] = []
            current = name
            continue
        raise PlanSyntaxError(f"unrecognized plan line: {line!r}")
    if not spans:
        raise EmptyPlan("no meta-action groups found")
    for g, group_spans in spans.items():
        # 依開始時間排序後再檢查，才分得出 gap / overlap
        group_spans.sort(key=lambda s: (s[0], s[1]))
    return MetaActionPlan(**{g: make_timeline(g, s) for g, s in spans.items()})


def render_plan(plan: MetaActionPlan) -> str:
    lines = []
    for g in GROUPS:
        tl = plan.get(g)
        if tl is None:
            continue
        lines.append(f"- {g}")
        for s in tl.segments:
            lines.append(f"  - {s.start / 10:.1f}s-{s.end / 10:.1f}s: {s.label}")
    return "\n".join(lines)


# ========== 6. 分箱、IOU、差異 ==========
def bin_timeline(timeline: GroupTimeline) -> List[str]:
    bins = []
    for s in timeline.segments:
        bins.extend([s.label] * s.duration)
    return bins


def plan_bins(plan: MetaActionPlan) -> dict:
    """{group: 64 格標籤或 None}"""
    return {g: (bin_timeline(plan.get(g)) if plan.get(g) is not None else None) for g in GROUPS}


def plan_iou(pred: MetaActionPlan, gt: MetaActionPlan) -> float:
    """64×3 格的 micro Jaccard：兩邊都有且標籤相同才算交集，任一邊有就算聯集"""
    pb, gb = plan_bins(pred), plan_bins(gt)
    inter = union = 0
    for g in GROUPS:
        p, t = pb[g], gb[g]
        if p is None and t is None:
            continue
        union += HORIZON_BINS
        if p is not None and t is not None:
            inter += sum(1 for a, b in zip(p, t) if a == b)
    return inter / union if union else 1.0


def diff_plans(pred: MetaActionPlan, gt: MetaActionPlan) -> List[PlanDiff]:
    """依組別、時間排序的最大差異區間；同一區間內 (pred, gt) 標籤對不變"""
    pb, gb = plan_bins(pred), plan_bins(gt)
    out = []
    for g in GROUPS:
        if pb[g] is None and gb[g] is None:
            continue
        p = pb[g] or [ABSENT] * HORIZON_BINS
        t = gb[g] or [ABSENT] * HORIZON_BINS
        i = 0
        while i < HORIZON_BINS:
            if p[i] == t[i]:
                i += 1
                continue
            j = i + 1
            while j < HORIZON_BINS and p[j] == p[i] and t[j] == t[i]:
                j += 1
            out.append(PlanDiff(g, i, j, p[i], t[i]))
            i = j
    return out


def plan_key(plan: MetaActionPlan) -> str:
    """可雜湊的標準形字串，用來計票取眾數計畫"""
    return render_plan(plan)
