# -*- coding: utf-8 -*-
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from common import set_quiet
from metaction import make_plan
from trajgeo import History, Trajectory, Route, RoadBoundary
from scenelab import Scene, synth_suite

set_quiet(True)


def straight_poses(speed=10.0, n=64):
    t = 0.1 * np.arange(1, n + 1)
    poses = np.zeros((n, 4))
    poses[:, 0] = speed * t
    return poses


def history_poses(speed=10.0):
    t = -0.1 * np.arange(16, 0, -1)
    poses = np.zeros((16, 4))
    poses[:, 0] = speed * t
    return poses


@pytest.fixture
def straight_scene():
    return Scene(
        id="straight-0",
        history=History(history_poses(10.0)),
        expert_future=Trajectory(straight_poses(10.0)),
        boundary=RoadBoundary([[-30, -5], [120, -5], [120, 5], [-30, 5]]),
        gt_plan=make_plan(longitudinal=[(0, 64, "Keep Speed")], lateral=[(0, 64, "Straight")],
                          lane=[(0, 64, "Keep Lane")]),
        route=Route([[4.0 * (i + 1), 0.0] for i in range(20)]),
        odd_tag="straight",
    )


@pytest.fixture(scope="session")
def suite_scenes():
    return synth_suite("mixed", 30, 7)
