# -*- coding: utf-8 -*-
"""
processor.py
------------
評估報表：每個場景算一列指標，再用 pandas 彙總成

1. 總表與各 odd_tag 分表 (MetricsRow 欄位 + Output Len. (Think Rate))
2. 難度分段表：依 minADE 分段，各段場景數、think rate、平均 minADE
"""

import math

import numpy as np
import pandas as pd

from common import IdMismatch, DataError
from metaction import plan_iou
from trajgeo import (
    TrajectorySet, VehicleFootprint, MetricsRow, set_metrics, set_corner_distance,
    collision_check, collision_rate, offroad_check, offroad_rate,
)
from codec import parse_response, detokenize_traj, think_stats, format_len_rate, CodecError

DEFAULT_BANDS = (0.0, 0.5, 1.0, 2.0)
METRIC_COLS = ["min_ade", "avg_ade", "min_fde", "avg_fde", "corner_distance",
               "collision_rate", "scene_collision_rate", "offroad_rate", "iou", "init_iou"]


# ========== 1. 單一場景 ==========
def _prediction_modes(pred):
    """回傳 (TrajectorySet, 回覆或 None)"""
    if pred.modes is not None:
        return pred.modes, None
    try:
        resp = parse_response(pred.response, require_plan=False)
    except CodecError as e:
        raise DataError(f"prediction {pred.scene_id}: {e}")
    return TrajectorySet((detokenize_traj(resp.traj_tokens),)), resp


def scene_row(scene, pred, ego_fp: VehicleFootprint, window: float = 5.0) -> dict:
    modes, resp = _prediction_modes(pred)
    m = set_metrics(modes, scene.expert_future)
    collisions = [collision_check(t, ego_fp, scene.agents, window) for t in modes]
    offroads = [offroad_check(t, ego_fp, scene.boundary) for t in modes]
    row = {
        "scene_id": scene.id,
        "odd_tag": scene.odd_tag,
        "split": scene.split,
        "min_ade": m.min_ade,
        "avg_ade": m.avg_ade,
        "min_fde": m.min_fde,
        "avg_fde": m.avg_fde,
        "corner_distance": set_corner_distance(modes, scene.expert_future, ego_fp),
        "n_modes": len(modes),
        "collisions": sum(collisions),
        "any_collision": int(any(collisions)),
        "offroads": sum(offroads),
        "iou": np.nan,
        "init_iou": np.nan,
        "has_response": resp is not None,
        "think": np.nan,
        "out_len": np.nan,
    }
    if resp is not None:
        row["think"] = float(resp.thinking is not None)
        row["out_len"] = float(resp.token_count)
        if resp.final_plan is not None:
            row["iou"] = plan_iou(resp.final_plan, scene.gt_plan)
            row["init_iou"] = plan_iou(resp.initial_plan, scene.gt_plan)
    return row, modes, resp


# ========== 2. 彙總 ==========
def _summarize(group: pd.DataFrame) -> pd.Series:
    s = {
        "scenes": len(group),
        "min_ade": group["min_ade"].mean(),
        "avg_ade": group["avg_ade"].mean(),
        "min_fde": group["min_fde"].mean(),
        "avg_fde": group["avg_fde"].mean(),
        "corner_distance": group["corner_distance"].mean(),
        # 碰撞/出界以 mode 彙總
        "collision_rate": group["collisions"].sum() / group["n_modes"].sum(),
        "scene_collision_rate": group["any_collision"].mean(),
        "offroad_rate": group["offroads"].sum() / group["n_modes"].sum(),
        "iou": group["iou"].mean(),
        "init_iou": group["init_iou"].mean(),
    }
    answered = group[group["has_response"]]
    if len(answered):
        s["output_len_think_rate"] = format_len_rate(answered["out_len"].mean(), answered["think"].mean())
    else:
        s["output_len_think_rate"] = ""
    return pd.Series(s)


def metrics_row(summary: pd.Series) -> MetricsRow:
    nan_to_none = lambda v: None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
    return MetricsRow(
        min_ade=float(summary["min_ade"]),
        avg_ade=float(summary["avg_ade"]),
        min_fde=float(summary["min_fde"]),
        avg_fde=float(summary["avg_fde"]),
        corner_distance=float(summary["corner_distance"]),
        collision_rate=float(summary["collision_rate"]),
        offroad_rate=float(summary["offroad_rate"]),
        iou=nan_to_none(summary["iou"]),
        init_iou=nan_to_none(summary["init_iou"]),
        extra={"scene_collision_rate": float(summary["scene_collision_rate"]), "scenes": int(summary["scenes"])},
    )


def band_table(df: pd.DataFrame, edges=DEFAULT_BANDS) -> pd.DataFrame:
    edges = [float(e) for e in edges]
    if sorted(edges) != edges or len(set(edges)) != len(edges):
        raise DataError(f"band edges must be strictly increasing: {edges}")
    # minADE >= 0，補上 0 這一段，每個場景都有落點
    if not edges or edges[0] > 0:
        edges = [0.0] + edges
    bins = edges + [np.inf]
    labels = [f"[{lo:g},{hi:g})" for lo, hi in zip(bins[:-1], bins[1:])]
    band = pd.cut(df["min_ade"], bins=bins, labels=labels, right=False)
    out = df.assign(band=band).groupby("band", observed=False).agg(
        scenes=("scene_id", "count"),
        think_rate=("think", "mean"),
        mean_min_ade=("min_ade", "mean"),
    ).reset_index()
    out["band"] = out["band"].astype(str)
    return out


# ========== 3. 對外入口 ==========
def build_report(scenes, predictions, ego_fp: VehicleFootprint = None, window: float = 5.0,
                 bands=DEFAULT_BANDS, split: str = None):
    """
    回傳 {"scenes": 每場景明細, "summary": 總表 + 各 odd_tag, "bands": 難度分段,
          "overall": MetricsRow, "think": (think_rate, mean_len) 或 None}
    """
    ego_fp = ego_fp or VehicleFootprint()
    if split:
        scenes = [s for s in scenes if s.split == split]
    by_id = {p.scene_id: p for p in predictions}
    scene_ids = [s.id for s in scenes]
    missing = [i for i in scene_ids if i not in by_id]
    extra = sorted(set(by_id) - set(scene_ids))
    if missing or extra:
        raise IdMismatch(f"predictions and scenes disagree: missing {missing[:5]} extra {extra[:5]}")
    if not scenes:
        raise DataError("no scenes to evaluate")

    rows, corpus_col, corpus_off, responses = [], [], [], []
    for scene in scenes:
        row, modes, resp = scene_row(scene, by_id[scene.id], ego_fp, window)
        rows.append(row)
        corpus_col.append((modes, scene.agents))
        corpus_off.append((modes, scene.boundary))
        if resp is not None:
            responses.append(resp)
    df = pd.DataFrame(rows)

    overall = _summarize(df)
    # 總表的兩個比例直接用指標函式再算一次，與 groupby 結果一致
    overall["collision_rate"] = collision_rate(corpus_col, ego_fp, window)
    overall["scene_collision_rate"] = collision_rate(corpus_col, ego_fp, window, scene_level=True)
    overall["offroad_rate"] = offroad_rate(corpus_off, ego_fp)
    overall["group"] = "overall"
    per_tag = [(_summarize(g).to_dict() | {"group": tag}) for tag, g in df.groupby("odd_tag", sort=True)]
    summary = pd.DataFrame([overall.to_dict()] + per_tag)
    summary = summary[["group", "scenes"] + METRIC_COLS + ["output_len_think_rate"]]

    return {
        "scenes": df,
        "summary": summary,
        "bands": band_table(df, bands),
        "overall": metrics_row(overall),
        "think": think_stats(responses) if responses else None,
    }
