# -*- coding: utf-8 -*-
import json
from collections import Counter

import numpy as np
import pytest

from common import DataError
from conftest import straight_poses
from metaction import make_plan, plan_iou
from trajgeo import Trajectory, TrajectorySet, set_metrics
from codec import parse_response
from clients import MockPolicy, StubTeacher, PolicyClient, TeacherClient, Transport
from scenelab import synth_suite
from pipeline import (
    RolloutConfig, FilterConfig, RolloutResult, PolicyError, NotFiltered, InvalidReasoning,
    UnknownDataset, MissingRound, DatasetMixSpec,
    modal_plan, rollout_scene, filter_decision, scatter_export, assemble_cf_sample, assemble_meta_sample,
    assemble_traj_sample, label_scene_cf, mix_datasets, plan_round, map_ordered, rollout_batch, label_batch,
)

REASON = "The crossing ahead is busy, so holding speed is risky; slowing early keeps a safe gap."


def _result(free, pf, iou=0.5, scene_id="s"):
    t = TrajectorySet((Trajectory(straight_poses()),))
    return RolloutResult(scene_id, t, t, make_plan(lateral=[(0, 64, "Straight")]), free, pf, iou)


@pytest.fixture(scope="module")
def rolled():
    """strength 0.5 的 mock rollout：(場景, 結果)"""
    scenes = synth_suite("mixed", 24, 3)
    policy = MockPolicy(scenes, strength=0.5)
    cfg = RolloutConfig(k=6, seed=7)
    return scenes, [rollout_scene(policy, s, cfg) for s in scenes]


# ========== Rollout ==========
def test_modal_plan_tie_breaks_to_first():
    a = make_plan(lateral=[(0, 64, "Straight")])
    b = make_plan(lateral=[(0, 64, "Left Turn")])
    assert modal_plan([a, b, b, a]) == a
    assert modal_plan([a, b, b]) == b


def test_rollout_strength_zero(suite_scenes):
    policy = MockPolicy(suite_scenes, strength=0.0)
    for scene in suite_scenes[:6]:
        r = rollout_scene(policy, scene, RolloutConfig(k=3))
        assert r.free_plan == scene.gt_plan
        assert r.minade_free == r.minade_pf
        assert r.free_iou == 1.0
        assert not filter_decision(r)


def test_rollout_consistency(rolled):
    scenes, results = rolled
    for scene, r in zip(scenes, results):
        assert len(r.free_set) == 6 and len(r.prefilled_set) == 6
        assert set_metrics(r.free_set, scene.expert_future).min_ade == pytest.approx(r.minade_free, abs=1e-9)
        assert set_metrics(r.prefilled_set, scene.expert_future).min_ade == pytest.approx(r.minade_pf, abs=1e-9)
        assert r.free_iou == plan_iou(r.free_plan, scene.gt_plan)


def test_rollout_deterministic_under_parallelism_and_order(rolled):
    scenes, results = rolled
    policy = MockPolicy(scenes, strength=0.5)
    cfg = RolloutConfig(k=6, seed=7)
    again, skipped = rollout_batch(policy, list(reversed(scenes)), cfg, workers=4)
    assert skipped == 0
    by_id = {r.scene_id: r for r in again}
    for r in results:
        assert by_id[r.scene_id] == r
    picked = lambda rs: sorted(r.scene_id for r in rs if filter_decision(r))
    assert picked(results) == picked(again)


@pytest.mark.slow
def test_prefilled_beats_free_on_corpus():
    scenes = synth_suite("mixed", 200, 7)
    results, _ = rollout_batch(MockPolicy(scenes, strength=0.3), scenes, RolloutConfig(seed=7), workers=4)
    share = np.mean([r.minade_pf <= r.minade_free for r in results])
    assert share >= 0.95


class _FlakyPolicy(PolicyClient):
    def __init__(self, inner, bad_id):
        self.inner, self.bad_id = inner, bad_id

    def call(self, req):
        if req.scene_id == self.bad_id:
            raise Transport("connection reset")
        return self.inner.call(req)


def test_rollout_batch_skips_failures(suite_scenes):
    scenes = suite_scenes[:4]
    policy = _FlakyPolicy(MockPolicy(scenes), scenes[1].id)
    with pytest.raises(PolicyError):
        rollout_scene(policy, scenes[1])
    results, skipped = rollout_batch(policy, scenes, RolloutConfig(k=2))
    assert skipped == 1
    assert [r.scene_id for r in results] == [scenes[0].id, scenes[2].id, scenes[3].id]


# ========== 篩選 ==========
def test_filter_examples():
    assert filter_decision(_result(0.9, 0.4), FilterConfig(0.5))
    assert not filter_decision(_result(0.4, 0.2), FilterConfig(0.5))
    assert not filter_decision(_result(0.9, 1.1), FilterConfig(0.5))
    assert filter_decision(_result(0.4, 0.2, iou=0.7), FilterConfig(0.5, mode="whole"))
    assert not filter_decision(_result(0.9, 0.4, iou=1.0), FilterConfig(0.5, mode="whole"))
    with pytest.raises(DataError):
        FilterConfig(-0.1)


def test_filter_monotone_in_epsilon(rolled):
    _, results = rolled
    for eps_lo, eps_hi in [(0.0, 0.5), (0.5, 1.0), (1.0, 3.0)]:
        for r in results:
            assert filter_decision(r, FilterConfig(eps_hi)) <= filter_decision(r, FilterConfig(eps_lo))


def test_scatter_export(rolled):
    _, results = rolled
    assert scatter_export([]) == []
    rows = scatter_export(results, FilterConfig(0.5))
    assert len(rows) == len(results)
    for row in rows:
        assert row["selected"] == (row["minade_pf"] < row["minade_free"] and row["minade_free"] > 0.5)


# ========== 組裝 ==========
def test_assemble_cf_sample(rolled):
    scenes, results = rolled
    pairs = [(s, r) for s, r in zip(scenes, results) if filter_decision(r)]
    assert pairs
    scene, result = pairs[0]
    rec = assemble_cf_sample(scene, result, REASON)
    assert rec.provenance == "cf"
    assert rec.response.corrected_plan == scene.gt_plan
    assert rec.response.initial_plan == result.free_plan
    assert parse_response(rec.response.raw_text) == rec.response
    assert [(s.role, s.weight, s.masked) for s in rec.loss_spans[1:]] == [
        ("initial_meta", 0.0, True), ("thinking", 10.0, False), ("corrected_meta", 10.0, False), ("traj", 1.0, False)]

    with pytest.raises(InvalidReasoning):
        assemble_cf_sample(scene, result, "The expert would stop here.")
    unselected = [(s, r) for s, r in zip(scenes, results) if not filter_decision(r)]
    if unselected:
        with pytest.raises(NotFiltered):
            assemble_cf_sample(unselected[0][0], unselected[0][1], REASON)


def test_assemble_meta_and_traj(straight_scene):
    meta = assemble_meta_sample(straight_scene)
    assert meta.provenance == "meta" and meta.response.initial_plan == straight_scene.gt_plan
    assert [s.role for s in meta.loss_spans[1:]] == ["initial_meta", "traj"]
    traj = assemble_traj_sample(straight_scene, include_route=True)
    assert traj.response.initial_plan is None
    assert traj.prompt.route_block is not None
    assert [s.role for s in traj.loss_spans[1:]] == ["traj"]


class _BadTeacher(TeacherClient):
    def call(self, req):
        if req.scene_id.endswith("0"):
            raise Transport("gateway timeout")
        return "The label says stop."


def test_label_batch_counts_skips(rolled):
    scenes, results = rolled
    pairs = [(s, r) for s, r in zip(scenes, results) if filter_decision(r)]
    records, skipped = label_batch(StubTeacher(), pairs, workers=2)
    assert skipped == 0 and len(records) == len(pairs)
    assert all(r.response.corrected_plan == s.gt_plan for r, (s, _) in zip(records, pairs))
    assert label_scene_cf(StubTeacher(), *pairs[0]) == records[0]

    records, skipped = label_batch(_BadTeacher(), pairs)
    assert records == [] and skipped == len(pairs)


# ========== 混合 ==========
def test_mix_counts():
    sources = {"traj": [f"t{i}" for i in range(100)], "meta": [f"m{i}" for i in range(40)],
               "cf_round_1": [f"c{i}" for i in range(10)]}
    out = mix_datasets(DatasetMixSpec.from_dict({"traj": 1, "meta": 1, "cf_round_1": 1}, seed=3), sources)
    assert len(out) == 150
    assert Counter(out) == Counter(sources["traj"] + sources["meta"] + sources["cf_round_1"])

    doubled = mix_datasets(DatasetMixSpec.from_dict({"meta": 2}), sources)
    assert len(doubled) == 80 and set(Counter(doubled).values()) == {2}

    big = mix_datasets(DatasetMixSpec.from_dict({"traj": 1, "meta": 10, "cf_round_1": 100}), sources)
    assert len(big) == 100 + 400 + 1000


def test_mix_deterministic_and_windowed():
    rows = [{"scene_id": f"s{i}", "n": i} for i in range(50)]
    sources = {"traj": rows}
    key = lambda r: json.dumps(r, sort_keys=True)
    a = mix_datasets(DatasetMixSpec.from_dict({"traj": 1}, seed=9), sources)
    b = mix_datasets(DatasetMixSpec.from_dict({"traj": 1}, seed=9), sources)
    assert a == b and a != rows
    w = mix_datasets(DatasetMixSpec.from_dict({"traj": 1}, seed=9, shuffle_window=10), sources)
    assert sorted(map(key, w)) == sorted(map(key, rows))
    for lo in range(0, 50, 10):
        assert {r["n"] for r in w[lo:lo + 10]} == set(range(lo, lo + 10))


def test_windowed_mix_interleaves_sources():
    sources = {"traj": [f"t{i}" for i in range(40)], "meta": [f"m{i}" for i in range(40)]}
    spec = DatasetMixSpec.from_dict({"traj": 1, "meta": 1}, seed=4, shuffle_window=10)
    out = mix_datasets(spec, sources)
    assert Counter(out) == Counter(sources["traj"] + sources["meta"])
    assert out == mix_datasets(spec, sources)
    for lo in range(0, 80, 10):
        assert {x[0] for x in out[lo:lo + 10]} == {"t", "m"}, out[lo:lo + 10]

    # 小資料集按比例攤開，不會整段擠在尾巴
    sources = {"traj": [f"t{i}" for i in range(100)], "cf_round_1": [f"c{i}" for i in range(10)]}
    out = mix_datasets(DatasetMixSpec.from_dict({"traj": 1, "cf_round_1": 1}, shuffle_window=11), sources)
    assert 4 <= sum(x.startswith("c") for x in out[:55]) <= 6


def test_mix_errors():
    with pytest.raises(UnknownDataset):
        DatasetMixSpec.from_dict({"cf": 1})
    with pytest.raises(UnknownDataset):
        mix_datasets(DatasetMixSpec.from_dict({"cf_round_2": 1}), {"traj": []})
    with pytest.raises(DataError):
        DatasetMixSpec.from_dict({"traj": 0})


def test_plan_round():
    assert dict(plan_round(1).entries) == {"traj": 1, "meta": 1, "cf_round_1": 1}
    assert dict(plan_round(2, "three_ds").entries) == {"traj": 1, "meta": 1, "cf_round_2": 1}
    assert dict(plan_round(2, "four_ds").entries) == {"traj": 1, "meta": 1, "cf_round_1": 1, "cf_round_2": 1}
    with pytest.raises(MissingRound):
        plan_round(2, "four_ds", available=[2])
    assert plan_round(3, "four_ds", seed=5).to_dict()["seed"] == 5


def test_map_ordered_keeps_order_and_catches():
    def f(x):
        if x == 3:
            raise DataError("three")
        return x * x

    out = map_ordered(f, list(range(6)), workers=3)
    assert [i for i, _ in out] == list(range(6))
    assert [r for _, r in out if not isinstance(r, Exception)] == [0, 1, 4, 16, 25]
    assert isinstance(out[3][1], DataError)
