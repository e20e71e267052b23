"""Rigid transforms, the pinhole camera and voxel ray traversal.

Camera frame convention: z forward, x right, y down. Pixel (i, j) covers
the half-open square [i, i+1) x [j, j+1) in continuous image coordinates,
so a projected point belongs to pixel ``floor(u), floor(v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


def _as_rotation(rotation) -> np.ndarray:
    r = np.array(rotation, dtype=np.float64).reshape(3, 3)
    if not np.allclose(r @ r.T, np.eye(3), atol=ORTHO_TOL, rtol=0.0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation determinant must be +1")
    return r


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (3, 4):
            return cls(m[:, :3], m[:, 3])
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 or 3x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        r = Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()
        return cls(r, translation)

    @classmethod
    def from_euler(cls, seq: str, angles, translation=(0.0, 0.0, 0.0),
                   degrees: bool = True) -> "RigidTransform":
        r = Rotation.from_euler(seq, angles, degrees=degrees).as_matrix()
        return cls(r, translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (np.allclose(self.rotation, np.eye(3), atol=tol, rtol=0.0)
                and np.allclose(self.translation, 0.0, atol=tol, rtol=0.0))

    def __repr__(self) -> str:
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"RigidTransform(rotvec={rv.round(6).tolist()}, t={self.translation.round(6).tolist()})"


def transform_point(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def interpolate(a: RigidTransform, b: RigidTransform, s: float) -> RigidTransform:
    """Linear translation and spherical rotation interpolation, ``s`` in [0, 1]."""
    if s <= 0.0:
        return a
    if s >= 1.0:
        return b
    rel = Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()
    r = a.rotation @ Rotation.from_rotvec(s * rel).as_matrix()
    t = (1.0 - s) * a.translation + s * b.translation
    return RigidTransform(r, t)


@dataclass(frozen=True)
class CameraModel:
    f: float
    cx: float
    cy: float
    width: int
    height: int
    max_range: float = 20.0

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def project(self, p_cam) -> tuple[float, float] | None:
        """Pixel coordinates of a camera-frame point, or None when out of view."""
        x, y, z = (float(c) for c in p_cam)
        if not z > 0.0:
            return None
        u = self.f * x / z + self.cx
        v = self.f * y / z + self.cy
        if 0.0 <= u < self.width and 0.0 <= v < self.height:
            return (u, v)
        return None

    def project_points(self, p_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised projection. Returns ``(u, v, in_view)``."""
        p = np.asarray(p_cam, dtype=np.float64).reshape(-1, 3)
        z = p[:, 2]
        front = z > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(front, self.f * p[:, 0] / np.where(front, z, 1.0) + self.cx, np.nan)
            v = np.where(front, self.f * p[:, 1] / np.where(front, z, 1.0) + self.cy, np.nan)
        ok = front & (u >= 0.0) & (u < self.width) & (v >= 0.0) & (v < self.height)
        return u, v, ok

    def unproject(self, u, v, depth) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        x = (u - self.cx) * d / self.f
        y = (v - self.cy) * d / self.f
        return np.stack(np.broadcast_arrays(x, y, d), axis=-1)

    def pixel_directions(self) -> np.ndarray:
        """Camera-frame ray directions through pixel centres, scaled so z == 1."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        x = (u + 0.5 - self.cx) / self.f
        y = (v + 0.5 - self.cy) / self.f
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def scaled(self, width: int, height: int) -> "CameraModel":
        s = width / self.width
        return CameraModel(self.f * s, self.cx * s, self.cy * height / self.height,
                           width, height, self.max_range)


@dataclass(frozen=True)
class Pose:
    """Camera-to-map transform at a time step."""

    transform: RigidTransform
    step: int = 0

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("step must be nonnegative")

    @property
    def position(self) -> np.ndarray:
        return self.transform.translation

    def to_camera(self, points_map) -> np.ndarray:
        return self.transform.inverse().apply(points_map)

    def to_map(self, points_cam) -> np.ndarray:
        return self.transform.apply(points_cam)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-map transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidTransform(np.column_stack([right, down, fwd]), eye)


def cast_ray(origin, direction, resolution: float,
             stop: Callable[[tuple[int, int, int], float], bool] | None = None,
             max_distance: float = math.inf,
             max_steps: int | None = None) -> Iterator[tuple[int, int, int]]:
    """Voxel traversal (Amanatides & Woo) from ``origin`` along ``direction``.

    Yields integer voxel indices in visiting order, starting with the voxel
    containing ``origin``. Each voxel is yielded only if its entry distance is
    below ``max_distance`` and ``stop(voxel, entry_distance)`` is falsy.
    """
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.dot(d, d)) - 1.0) > 2e-9:
        raise ValueError("direction must be a unit vector")
    o = np.asarray(origin, dtype=np.float64) / resolution
    voxel = [int(math.floor(c)) for c in o]
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_max[a] = (voxel[a] + 1 - o[a]) * resolution / d[a]
            t_delta[a] = resolution / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_max[a] = (voxel[a] - o[a]) * resolution / d[a]
            t_delta[a] = -resolution / d[a]
    t = 0.0
    n = 0
    while t < max_distance:
        v = (voxel[0], voxel[1], voxel[2])
        if stop is not None and stop(v, t):
            return
        yield v
        n += 1
        if max_steps is not None and n >= max_steps:
            return
        a = 0 if t_max[0] <= t_max[1] and t_max[0] <= t_max[2] else (1 if t_max[1] <= t_max[2] else 2)
        if t_max[a] == math.inf:
            return
        t = t_max[a]
        voxel[a] += step[a]
        t_max[a] += t_delta[a]
