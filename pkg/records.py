# -*- coding: utf-8 -*-
"""
records.py
----------
各種 JSONL 檔的一行格式：場景、rollout 結果、訓練樣本、評估預測。

座標類數值一律存 6 位有效數字；由座標算出來的 minADE / IOU 照原值存，
重新讀檔後從軌跡重算才會完全一致。
"""

from typing import List, Optional

from common import CurationError, DataError, ParseError, iter_jsonl, write_jsonl, sig6, sig6_array
from metaction import parse_plan, render_plan
from trajgeo import (
    Trajectory, TrajectorySet, History, Route, RoadBoundary, AgentTrack, VehicleFootprint,
)
from scenelab import Scene
from codec import (
    PromptBundle, TrainingRecord, LossSpan, parse_response,
)
from pipeline import RolloutResult


def _read(path: str, from_dict) -> list:
    """逐行轉換，任何資料錯誤都帶上行號"""
    out = []
    for line_no, row in iter_jsonl(path):
        try:
            out.append(from_dict(row))
        except ParseError:
            raise
        except (CurationError, KeyError, TypeError, ValueError) as e:
            reason = f"missing field {e}" if isinstance(e, KeyError) else str(e)
            raise ParseError(line_no, reason, path)
    return out


# ========== 1. 場景 ==========
def scene_to_dict(scene: Scene) -> dict:
    return {
        "id": scene.id,
        "history": sig6(scene.history.poses),
        "expert_future": sig6(scene.expert_future.poses),
        "gt_plan": render_plan(scene.gt_plan),
        "route": sig6(scene.route.waypoints) if scene.route is not None else None,
        "agents": [
            {
                "id": a.id,
                "footprint": {"length": sig6(a.footprint.length), "width": sig6(a.footprint.width)},
                "trajectory": sig6(a.trajectory.poses),
            }
            for a in scene.agents
        ],
        "boundary": sig6(scene.boundary.polygon),
        "odd_tag": scene.odd_tag,
        "split": scene.split,
    }


def scene_from_dict(d: dict) -> Scene:
    if not isinstance(d, dict):
        raise DataError("scene line must be an object")
    split = d.get("split", "train")
    if split not in ("train", "val"):
        raise DataError(f"unknown split {split!r}")
    return Scene(
        id=str(d["id"]),
        history=History(d["history"]),
        expert_future=Trajectory(d["expert_future"]),
        boundary=RoadBoundary(d["boundary"]),
        gt_plan=parse_plan(d["gt_plan"]),
        route=Route(d["route"]) if d.get("route") is not None else None,
        agents=tuple(
            AgentTrack(str(a["id"]), VehicleFootprint(float(a["footprint"]["length"]), float(a["footprint"]["width"])),
                       Trajectory(a["trajectory"]))
            for a in d.get("agents") or []
        ),
        odd_tag=str(d.get("odd_tag", "")),
        split=split,
    )


def snap_scene(scene: Scene) -> Scene:
    """寫檔前後一致：先把座標截到 6 位有效數字"""
    return scene_from_dict(scene_to_dict(scene))


def read_scenes(path: str) -> List[Scene]:
    scenes = _read(path, scene_from_dict)
    seen = set()
    for s in scenes:
        if s.id in seen:
            raise DataError(f"duplicate scene id {s.id} in {path}")
        seen.add(s.id)
    return scenes


def write_scenes(scenes, path: str) -> int:
    return write_jsonl((scene_to_dict(s) for s in scenes), path)


# ========== 2. Rollout 結果 ==========
def rollout_to_dict(r: RolloutResult) -> dict:
    return {
        "scene_id": r.scene_id,
        "free_set": [sig6(m.poses) for m in r.free_set],
        "prefilled_set": [sig6(m.poses) for m in r.prefilled_set],
        "free_plan": render_plan(r.free_plan),
        "minade_free": float(r.minade_free),
        "minade_pf": float(r.minade_pf),
        "free_iou": float(r.free_iou),
    }


def rollout_from_dict(d: dict) -> RolloutResult:
    return RolloutResult(
        scene_id=str(d["scene_id"]),
        free_set=TrajectorySet(tuple(Trajectory(m) for m in d["free_set"])),
        prefilled_set=TrajectorySet(tuple(Trajectory(m) for m in d["prefilled_set"])),
        free_plan=parse_plan(d["free_plan"]),
        minade_free=float(d["minade_free"]),
        minade_pf=float(d["minade_pf"]),
        free_iou=float(d["free_iou"]),
    )


def read_rollouts(path: str) -> List[RolloutResult]:
    return _read(path, rollout_from_dict)


def write_rollouts(results, path: str) -> int:
    return write_jsonl((rollout_to_dict(r) for r in results), path)


# ========== 3. 訓練樣本 ==========
def record_to_dict(rec: TrainingRecord) -> dict:
    return {
        "scene_id": rec.scene_id,
        "provenance": rec.provenance,
        "round": rec.round_tag,
        "prompt": {
            "system": rec.prompt.system,
            "user": rec.prompt.user,
            "task": rec.prompt.task,
            "route_block": rec.prompt.route_block,
        },
        "response": rec.response.raw_text,
        "loss_spans": [
            {"role": s.role, "start": s.start, "end": s.end, "weight": s.weight, "masked": s.masked}
            for s in rec.loss_spans
        ],
    }


def record_from_dict(d: dict) -> TrainingRecord:
    provenance = d["provenance"]
    p = d["prompt"]
    prompt = PromptBundle(p["system"], p["user"], p["task"], p.get("route_block"))
    response = parse_response(d["response"], require_plan=provenance != "traj_only")
    spans = tuple(LossSpan(s["role"], int(s["start"]), int(s["end"]), float(s["weight"]), bool(s["masked"]))
                  for s in d.get("loss_spans") or [])
    return TrainingRecord(str(d["scene_id"]), prompt, response, provenance, str(d.get("round", "")), spans)


def read_records(path: str) -> List[TrainingRecord]:
    return _read(path, record_from_dict)


def read_record_rows(path: str) -> List[dict]:
    """mix 用：保留原始 dict，只確認每行都是合法樣本"""
    rows = []
    for line_no, row in iter_jsonl(path):
        try:
            record_from_dict(row)
        except (CurationError, KeyError, TypeError, ValueError) as e:
            raise ParseError(line_no, str(e), path)
        rows.append(row)
    return rows


def write_records(records, path: str) -> int:
    return write_jsonl((record_to_dict(r) for r in records), path)


# ========== 4. 評估預測 ==========
class Prediction:
    """一行預測：原始回覆文字，或直接給 mode 軌跡"""

    def __init__(self, scene_id: str, response: Optional[str] = None, modes: Optional[TrajectorySet] = None):
        if (response is None) == (modes is None):
            raise DataError(f"prediction {scene_id} needs exactly one of response / modes")
        self.scene_id = scene_id
        self.response = response
        self.modes = modes


def prediction_from_dict(d: dict) -> Prediction:
    if d.get("response") is not None:
        return Prediction(str(d["id"]), response=str(d["response"]))
    modes = d.get("modes")
    if modes is None:
        raise DataError(f"prediction {d.get('id')} has neither response nor modes")
    return Prediction(str(d["id"]), modes=TrajectorySet(tuple(Trajectory(sig6_array(m)) for m in modes)))


def read_predictions(path: str) -> List[Prediction]:
    preds = _read(path, prediction_from_dict)
    seen = set()
    for p in preds:
        if p.scene_id in seen:
            raise DataError(f"duplicate prediction id {p.scene_id} in {path}")
        seen.add(p.scene_id)
    return preds
