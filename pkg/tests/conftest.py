"""Shared fixtures: compact synthetic scenes kept small enough for fast tests."""

import numpy as np
import pytest

from moslabel import simulate
from moslabel.geometry import Pose, rot_z, translate
from moslabel.simulate import BoxSpec, MoverSpec, SceneSpec, SensorProfile


def compact_sensor_suite() -> tuple[SensorProfile, ...]:
    """Low-ray-count versions of the four default profiles."""
    return (
        SensorProfile("aeva", 100.0, 20.0, 24, 10, 60.0, translate(0.5, 0.3, -0.2), 0.0, 0.013),
        SensorProfile("livox", 70.0, 70.0, 20, 20, 70.0, translate(0.6, -0.3, -0.1), 0.25, 0.027),
        SensorProfile("ouster", 360.0, 22.5, 256, 16, 80.0, Pose.identity(), 0.0, 0.0),
        SensorProfile("velodyne", 360.0, 30.0, 180, 8, 60.0, translate(-0.2, 0.0, 0.4), 0.0, 0.041),
    )


def small_demo_scene(frame_count=40, seed=11) -> SceneSpec:
    spec = simulate.demo_scene(frame_count=frame_count, seed=seed, sensors=compact_sensor_suite())
    return spec


@pytest.fixture(scope="session")
def demo_bundle(tmp_path_factory):
    """A 40-frame demo bundle written to disk once per session."""
    out = tmp_path_factory.mktemp("bundle")
    spec = small_demo_scene()
    bundle = simulate.generate_scene(spec)
    simulate.write_bundle(bundle, out)
    return out, bundle, spec


def straight_trajectory(n, step=1.0, heading=0.0, start=(0.0, 0.0)):
    """Poses marching along a fixed heading; used as a clustering fixture."""
    poses = []
    for i in range(n):
        x = start[0] + step * i * np.cos(heading)
        y = start[1] + step * i * np.sin(heading)
        poses.append(Pose(rot_z(heading).rotation, np.array([x, y, 0.0])))
    return poses
