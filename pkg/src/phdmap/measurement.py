"""One time step of segmented, tracked depth input."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import CameraModel, Pose, RigidTransform
from .particle_store import UNLABELED_ID


@dataclass(frozen=True)
class InstanceLabel:
    semantic_label: str
    background: bool = False


@dataclass(eq=False)
class MeasurementFrame:
    """Depth and instance-id images registered to a camera pose.

    ``depth`` holds z-depth in meters; zero, negative, non-finite or beyond
    ``camera.max_range`` marks an invalid pixel. ``ids`` holds instance ids,
    0 meaning unlabeled (mapped to the reserved unlabeled background id).
    ``transforms`` maps tracked instance ids to their motion from the
    previous step, in the map frame.
    """

    step: int
    pose: Pose
    camera: CameraModel
    depth: np.ndarray
    ids: np.ndarray
    transforms: dict[int, RigidTransform] = field(default_factory=dict)
    labels: dict[int, InstanceLabel] = field(default_factory=dict)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.uint32)
        if self.depth.shape != self.camera.shape:
            raise ValueError(f"depth shape {self.depth.shape} != camera {self.camera.shape}")
        if self.ids.shape != self.depth.shape:
            raise ValueError("instance image and depth image differ in shape")

    @cached_property
    def valid(self) -> np.ndarray:
        d = self.depth
        return np.isfinite(d) & (d > 0) & (d <= self.camera.max_range)

    @cached_property
    def pixel_index(self) -> np.ndarray:
        """Flat (row-major) pixel index of each measurement point."""
        return np.flatnonzero(self.valid.ravel())

    @cached_property
    def point_depths(self) -> np.ndarray:
        return self.depth.ravel()[self.pixel_index].astype(np.float64)

    @cached_property
    def points_camera(self) -> np.ndarray:
        w = self.camera.width
        v, u = np.divmod(self.pixel_index, w)
        return self.camera.unproject(u + 0.5, v + 0.5, self.point_depths).reshape(-1, 3)

    @cached_property
    def points(self) -> np.ndarray:
        """Measurement points in the map frame."""
        return self.pose.to_map(self.points_camera)

    @cached_property
    def point_ids(self) -> np.ndarray:
        ids = self.ids.ravel()[self.pixel_index].astype(np.int64)
        ids[ids == 0] = UNLABELED_ID
        return ids

    def effective_depth(self) -> np.ndarray:
        """Depth image with invalid pixels replaced by the max sensing range."""
        d = self.depth.astype(np.float64)
        return np.where(self.valid, d, self.camera.max_range)

    def instance_ids(self) -> np.ndarray:
        return np.unique(self.point_ids)

    def instance_points(self, instance_id: int) -> np.ndarray:
        return self.points[self.point_ids == int(instance_id)]

    def label_of(self, instance_id: int) -> InstanceLabel:
        if int(instance_id) == UNLABELED_ID:
            return self.labels.get(UNLABELED_ID, InstanceLabel("unlabeled", True))
        return self.labels.get(int(instance_id), InstanceLabel("unknown", False))
