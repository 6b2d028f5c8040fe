# -*- coding: utf-8 -*-
"""
pipeline.py
-----------
資料飛輪：rollout → 篩選 → 老師標註 → 混合資料集 → 下一輪。

✔ 每個場景的隨機性只由 (全域 seed, 場景 id, 取樣序號) 決定，平行度不影響輸出
✔ policy / 老師失敗只跳過該場景並記錄，不中斷整批
"""

import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from common import CurationError, DataError, ServiceError, derive_seed, rng_for, sig6_array, log, is_quiet
from metaction import MetaActionPlan, plan_iou, plan_key, render_plan
from trajgeo import Trajectory, TrajectorySet, set_metrics
from codec import (
    TASK_META_TRAJ, TASK_TRAJ_ONLY, CodecError, LossPolicy, TrainingRecord, assign_loss_spans,
    build_response, detokenize_traj, parse_response, render_prompt, tokenize_traj,
)
from clients import (
    ClientError, MODE_FREE, MODE_PREFILLED, PolicyClient, PolicyRequest, ReasoningConstraints,
    TeacherClient, TeacherRequest, validate_reasoning,
)


# ========== 1. 錯誤類別 ==========
class PolicyError(ServiceError):
    def __init__(self, scene_id: str, reason: str):
        self.scene_id = scene_id
        self.reason = reason
        super().__init__(f"scene {scene_id}: {reason}")


class NotFiltered(DataError):
    pass


class InvalidReasoning(DataError):
    pass


class UnknownDataset(DataError):
    pass


class MissingRound(DataError):
    pass


# ========== 2. 設定與結果型別 ==========
@dataclass(frozen=True)
class RolloutConfig:
    k: int = 6
    temperature: float = 0.8
    seed: int = 7
    think_mode: str = "adaptive"
    include_route: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise DataError("rollout k must be >= 1")
        if not self.temperature > 0:
            raise DataError("rollout temperature must be > 0")


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.5
    mode: str = "filtered"        # filtered | whole

    def __post_init__(self):
        if self.epsilon < 0:
            raise DataError("filter epsilon must be >= 0")
        if self.mode not in ("filtered", "whole"):
            raise DataError(f"unknown filter mode {self.mode!r}")


@dataclass(frozen=True)
class RolloutResult:
    scene_id: str
    free_set: TrajectorySet
    prefilled_set: TrajectorySet
    free_plan: MetaActionPlan
    minade_free: float
    minade_pf: float
    free_iou: float

    def __post_init__(self):
        if not 0.0 <= self.free_iou <= 1.0:
            raise DataError(f"free_iou {self.free_iou} outside [0, 1]")


# ========== 3. Rollout ==========
def modal_plan(plans: Sequence[MetaActionPlan]) -> MetaActionPlan:
    """出現最多次的計畫；平手取序號最小的"""
    keys = [plan_key(p) for p in plans]
    counts = Counter(keys)
    best = max(range(len(keys)), key=lambda i: (counts[keys[i]], -i))
    return plans[best]


def _query(policy: PolicyClient, req: PolicyRequest):
    try:
        resp = parse_response(policy.call(req))
    except (ClientError, CodecError) as e:
        raise PolicyError(req.scene_id, f"{req.mode} sample failed ({e})")
    # 先截到 6 位有效數字，存檔後重算的 minADE 才會一致
    traj = Trajectory(sig6_array(detokenize_traj(resp.traj_tokens).poses))
    return resp, traj


def rollout_scene(policy: PolicyClient, scene, cfg: RolloutConfig = None) -> RolloutResult:
    cfg = cfg or RolloutConfig()
    history = tuple(tuple(map(float, p)) for p in scene.history.poses)
    free_trajs, free_plans, pf_trajs = [], [], []
    for i in range(cfg.k):
        seed = derive_seed(cfg.seed, scene.id, i)
        common = dict(scene_id=scene.id, history=history, include_route=cfg.include_route,
                      temperature=cfg.temperature, seed=seed, think_mode=cfg.think_mode)
        resp, traj = _query(policy, PolicyRequest(mode=MODE_FREE, **common))
        if resp.final_plan is None:
            raise PolicyError(scene.id, "free sample has no meta actions")
        free_trajs.append(traj)
        free_plans.append(resp.final_plan)
        _, traj = _query(policy, PolicyRequest(mode=MODE_PREFILLED, prefilled_plan=scene.gt_plan, **common))
        pf_trajs.append(traj)
    free_set, pf_set = TrajectorySet(tuple(free_trajs)), TrajectorySet(tuple(pf_trajs))
    plan = modal_plan(free_plans)
    return RolloutResult(
        scene_id=scene.id,
        free_set=free_set,
        prefilled_set=pf_set,
        free_plan=plan,
        minade_free=set_metrics(free_set, scene.expert_future).min_ade,
        minade_pf=set_metrics(pf_set, scene.expert_future).min_ade,
        free_iou=plan_iou(plan, scene.gt_plan),
    )


# ========== 4. 篩選 ==========
def filter_decision(result: RolloutResult, cfg: FilterConfig = None) -> bool:
    cfg = cfg or FilterConfig()
    if cfg.mode == "whole":
        return result.free_iou < 1.0
    return result.minade_pf < result.minade_free and result.minade_free > cfg.epsilon


def scatter_export(results: Sequence[RolloutResult], cfg: FilterConfig = None) -> List[dict]:
    return [
        {
            "scene_id": r.scene_id,
            "minade_free": r.minade_free,
            "minade_pf": r.minade_pf,
            "free_iou": r.free_iou,
            "selected": filter_decision(r, cfg),
        }
        for r in results
    ]


# ========== 5. 組裝訓練樣本 ==========
def assemble_cf_sample(scene, result: RolloutResult, reasoning: str, cfg: FilterConfig = None,
                       loss: LossPolicy = None, round_tag: str = "cf_round_1", include_route: bool = False,
                       constraints: ReasoningConstraints = None) -> TrainingRecord:
    if result.scene_id != scene.id:
        raise DataError(f"rollout {result.scene_id} does not belong to scene {scene.id}")
    if not filter_decision(result, cfg):
        raise NotFiltered(f"scene {scene.id} was not selected by the filter")
    verdict = validate_reasoning(reasoning, constraints)
    if not verdict:
        raise InvalidReasoning(f"scene {scene.id}: reasoning rejected ({verdict.reason})")
    response = build_response(result.free_plan, tokenize_traj(scene.expert_future), reasoning, scene.gt_plan)
    return _record(scene, response, "cf", round_tag, include_route, loss)


def assemble_meta_sample(scene, loss: LossPolicy = None, round_tag: str = "meta",
                         include_route: bool = False) -> TrainingRecord:
    response = build_response(scene.gt_plan, tokenize_traj(scene.expert_future))
    return _record(scene, response, "meta", round_tag, include_route, loss)


def assemble_traj_sample(scene, loss: LossPolicy = None, round_tag: str = "traj",
                         include_route: bool = False) -> TrainingRecord:
    response = build_response(None, tokenize_traj(scene.expert_future))
    return _record(scene, response, "traj_only", round_tag, include_route, loss)


def _record(scene, response, provenance, round_tag, include_route, loss) -> TrainingRecord:
    task = TASK_TRAJ_ONLY if provenance == "traj_only" else TASK_META_TRAJ
    prompt = render_prompt(scene, task, include_route)
    record = TrainingRecord(scene.id, prompt, response, provenance, round_tag)
    return TrainingRecord(scene.id, prompt, response, provenance, round_tag,
                          tuple(assign_loss_spans(record, loss or LossPolicy())))


def label_scene_cf(teacher: TeacherClient, scene, result: RolloutResult, **kwargs) -> TrainingRecord:
    """問老師要一段反思，驗證通過才組成 CF 樣本"""
    req = TeacherRequest(scene.id, render_plan(result.free_plan), render_plan(scene.gt_plan))
    try:
        reasoning = teacher.call(req)
    except ClientError as e:
        raise PolicyError(scene.id, f"teacher failed ({e})")
    return assemble_cf_sample(scene, result, reasoning, **kwargs)


# ========== 6. 資料集混合 ==========
_DATASET_ID = re.compile(r"^(traj|meta|cf_round_[1-9][0-9]*)$")


@dataclass(frozen=True)
class DatasetMixSpec:
    entries: Tuple[Tuple[str, int], ...]
    seed: int = 7
    shuffle_window: int = 0

    def __post_init__(self):
        entries = tuple((str(n), int(m)) for n, m in self.entries)
        for name, mult in entries:
            if not _DATASET_ID.match(name):
                raise UnknownDataset(f"unknown dataset id {name!r}")
            if mult < 0:
                raise DataError(f"{name}: multiplier must be >= 0")
        if not any(m > 0 for _, m in entries):
            raise DataError("mix spec needs at least one positive multiplier")
        if self.shuffle_window < 0:
            raise DataError("shuffle window must be >= 0")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_dict(cls, datasets: dict, seed: int = 7, shuffle_window: int = 0) -> "DatasetMixSpec":
        return cls(tuple((k, v) for k, v in (datasets or {}).items()), int(seed), int(shuffle_window or 0))

    def to_dict(self) -> dict:
        return {"datasets": dict(self.entries), "seed": self.seed, "shuffle_window": self.shuffle_window}


def _interleave(chunks: List[list], rng) -> list:
    """各段依相對位置 (i + u) / len 交錯合併，每段內部順序不變"""
    keys = np.concatenate([(np.arange(len(c)) + rng.random(len(c))) / max(len(c), 1) for c in chunks])
    flat = [x for c in chunks for x in c]
    return [flat[i] for i in np.argsort(keys, kind="stable")]


def mix_datasets(spec: DatasetMixSpec, sources: Dict[str, list]) -> list:
    chunks = []
    for name, mult in spec.entries:
        if mult == 0:
            continue
        if name not in sources:
            raise UnknownDataset(f"no source given for dataset {name!r}")
        chunks += [list(sources[name])] * mult
    rng = rng_for("mix", spec.seed)
    stream = [x for c in chunks for x in c]
    n = len(stream)
    if spec.shuffle_window and spec.shuffle_window < n:
        # 先把各資料集交錯，視窗內才會混到不同來源
        stream = _interleave(chunks, rng)
        order = []
        for lo in range(0, n, spec.shuffle_window):
            hi = min(lo + spec.shuffle_window, n)
            order.extend((lo + rng.permutation(hi - lo)).tolist())
    else:
        order = rng.permutation(n).tolist()
    return [stream[i] for i in order]


def plan_round(round_no: int, variant: str = "three_ds", available: Optional[Sequence[int]] = None,
               seed: int = 7) -> DatasetMixSpec:
    if round_no < 1:
        raise DataError("round must be >= 1")
    if variant not in ("three_ds", "four_ds"):
        raise DataError(f"unknown round variant {variant!r}")
    needed = [round_no] if variant == "three_ds" else list(range(1, round_no + 1))
    if available is not None:
        missing = [r for r in needed if r not in set(available)]
        if missing:
            raise MissingRound(f"cf datasets missing for round(s) {missing}")
    entries = [("traj", 1), ("meta", 1)] + [(f"cf_round_{r}", 1) for r in needed]
    return DatasetMixSpec(tuple(entries), seed)


# ========== 7. 批次執行 ==========
def map_ordered(func, items: Sequence, workers: int = 1, desc: str = ""):
    """
    對每個 item 跑 func，回傳 [(item, 結果 或 例外)]，順序與輸入一致。
    只攔 CurationError 系列，其餘例外照常往外丟。
    """
    out = [None] * len(items)

    def _safe(i, item):
        try:
            return i, func(item)
        except CurationError as e:
            return i, e

    if workers <= 1:
        for i, item in enumerate(tqdm(items, desc=desc, disable=is_quiet())):
            out[i] = _safe(i, item)[1]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_safe, i, item) for i, item in enumerate(items)]
            for future in tqdm(as_completed(futures), total=len(items), desc=desc, disable=is_quiet()):
                i, res = future.result()
                out[i] = res
    return list(zip(items, out))


def rollout_batch(policy: PolicyClient, scenes: Sequence, cfg: RolloutConfig, workers: int = 1):
    results, skipped = [], 0
    for scene, res in map_ordered(lambda s: rollout_scene(policy, s, cfg), scenes, workers, "Rollout"):
        if isinstance(res, PolicyError):
            skipped += 1
            log(f"⚠️ 跳過場景 {scene.id}: {res.reason}")
        elif isinstance(res, Exception):
            raise res
        else:
            results.append(res)
    return results, skipped


def label_batch(teacher: TeacherClient, pairs: Sequence[Tuple[object, RolloutResult]], workers: int = 1, **kwargs):
    """pairs: [(scene, result)]，只送已通過篩選的場景"""
    records, skipped = [], 0
    for (scene, _), res in map_ordered(lambda p: label_scene_cf(teacher, p[0], p[1], **kwargs),
                                       pairs, workers, "Label-CF"):
        if isinstance(res, (PolicyError, InvalidReasoning)):
            skipped += 1
            log(f"⚠️ 跳過場景 {scene.id}: {res}")
        elif isinstance(res, Exception):
            raise res
        else:
            records.append(res)
    return records, skipped
