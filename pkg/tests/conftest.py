from __future__ import annotations

import numpy as np
import pytest

from phdmap import CameraModel, InstanceLabel, MeasurementFrame, Pose, RigidTransform
from phdmap.geometry import look_at


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_camera(width=32, height=24, f=None, max_range=20.0) -> CameraModel:
    f = float(width) if f is None else f
    return CameraModel(f, width / 2.0, height / 2.0, width, height, max_range)


def frame_from_points(cam: CameraModel, pose: Pose, pixels, depths, ids, step=0,
                      labels=None, transforms=None) -> MeasurementFrame:
    """A frame whose only valid pixels are ``pixels`` (u, v) at ``depths``."""
    depth = np.zeros(cam.shape, dtype=np.float32)
    idimg = np.zeros(cam.shape, dtype=np.uint32)
    for (u, v), d, i in zip(pixels, depths, ids):
        depth[v, u] = d
        idimg[v, u] = i
    if labels is None:
        labels = {int(i): InstanceLabel("thing") for i in set(int(i) for i in ids)}
    return MeasurementFrame(step, pose, cam, depth, idimg, transforms or {}, labels)


def identity_pose(step=0) -> Pose:
    return Pose(RigidTransform.identity(), step)


def forward_pose(step=0) -> Pose:
    # camera at the origin looking down +x with z up
    return Pose(look_at((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)), step)
