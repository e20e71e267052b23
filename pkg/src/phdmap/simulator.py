"""Synthetic dynamic scenes: ray-cast depth and instance images, tracked
transforms with optional noise, ground-truth labeled voxel maps, and the
recorded-sequence directory format used for replay.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import yaml

from .geometry import CameraModel, Pose, RigidTransform, interpolate, look_at
from .measurement import InstanceLabel, MeasurementFrame

FIRST_OBJECT_ID = 100


# -- shapes ---------------------------------------------------------------------------

class Shape:
    """Surface in its local frame. ``intersect`` returns the ray parameter of
    the nearest hit with t > 0 (``inf`` on a miss) for rays ``o + t d``."""

    kind = "shape"

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class Box(Shape):
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind = "box"

    def intersect(self, o, d):
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        par = d == 0
        inside = np.abs(o) <= h
        lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tn = lo.max(axis=1)
        tf = hi.min(axis=1)
        hit = (tn <= tf) & (tf > 0)
        t = np.where(tn > 0, tn, tf)
        return np.where(hit, t, np.inf)

    def to_dict(self):
        return {"type": "box", "size": [float(x) for x in self.size]}


@dataclass
class Sphere(Shape):
    radius: float = 0.5
    kind = "sphere"

    def intersect(self, o, d):
        a = np.einsum("ij,ij->i", d, d)
        b = np.einsum("ij,ij->i", o, d)
        c = np.einsum("ij,ij->i", o, o) - self.radius ** 2
        disc = b * b - a * c
        s = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - s) / a
        t1 = (-b + s) / a
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def to_dict(self):
        return {"type": "sphere", "radius": float(self.radius)}


@dataclass
class Cylinder(Shape):
    """Capped cylinder along the local z axis, centered at the origin."""

    radius: float = 0.5
    height: float = 1.0
    kind = "cylinder"

    def intersect(self, o, d):
        r2 = self.radius ** 2
        hz = 0.5 * self.height
        best = np.full(len(o), np.inf)
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r2
        disc = b * b - a * c
        ok = (a > 0) & (disc >= 0)
        s = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in ((-b - s) / a, (-b + s) / a):
                z = o[:, 2] + t * d[:, 2]
                good = ok & (t > 0) & (np.abs(z) <= hz)
                best = np.where(good & (t < best), t, best)
            for zc in (-hz, hz):
                t = (zc - o[:, 2]) / d[:, 2]
                x = o[:, 0] + t * d[:, 0]
                y = o[:, 1] + t * d[:, 1]
                good = (d[:, 2] != 0) & (t > 0) & (x * x + y * y <= r2)
                best = np.where(good & (t < best), t, best)
        return best

    def to_dict(self):
        return {"type": "cylinder", "radius": float(self.radius), "height": float(self.height)}


@dataclass
class Mesh(Shape):
    """Triangle mesh; ray hits via Moller-Trumbore."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    kind = "mesh"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def intersect(self, o, d, chunk: int = 4096):
        v0 = self.vertices[self.faces[:, 0]]
        e1 = self.vertices[self.faces[:, 1]] - v0
        e2 = self.vertices[self.faces[:, 2]] - v0
        out = np.full(len(o), np.inf)
        for s in range(0, len(o), chunk):
            oo = o[s:s + chunk, None, :]
            dd = d[s:s + chunk, None, :]
            p = np.cross(dd, e2[None])
            det = np.einsum("rfk,fk->rf", p, e1)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / det
                tv = oo - v0[None]
                u = np.einsum("rfk,rfk->rf", tv, p) * inv
                q = np.cross(tv, e1[None])
                v = np.einsum("rfk,rfk->rf", dd, q) * inv
                t = np.einsum("rfk,fk->rf", q, e2) * inv
            ok = (np.abs(det) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
            out[s:s + chunk] = np.where(ok, t, np.inf).min(axis=1)
        return out

    @classmethod
    def from_box(cls, size) -> "Mesh":
        hx, hy, hz = (0.5 * float(x) for x in size)
        v = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
             [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
        return cls(v, np.array(f))

    def to_dict(self):
        return {"type": "mesh", "vertices": self.vertices.tolist(), "faces": self.faces.tolist()}


def shape_from_dict(d: dict) -> Shape:
    kind = d.get("type")
    if kind == "box":
        return Box(tuple(float(x) for x in d["size"]))
    if kind == "sphere":
        return Sphere(float(d["radius"]))
    if kind == "cylinder":
        return Cylinder(float(d["radius"]), float(d["height"]))
    if kind == "mesh":
        return Mesh(np.array(d["vertices"]), np.array(d["faces"]))
    raise ValueError(f"unknown shape type {kind!r}")


# -- scene ------------------------------------------------------------------------------

@dataclass
class SceneObject:
    """A shape following keyframed poses, interpolated linearly between keys.

    Poses are held constant before the first and after the last keyframe.
    """

    instance_id: int
    semantic_label: str
    shape: Shape
    keyframes: list[tuple[int, RigidTransform]]
    movable: bool = True
    background: bool = False

    def __post_init__(self):
        if not self.keyframes:
            raise ValueError(f"object {self.instance_id} has no keyframes")
        self.keyframes = sorted(self.keyframes, key=lambda kv: kv[0])

    def pose_at(self, step: float) -> RigidTransform:
        keys = self.keyframes
        if step <= keys[0][0]:
            return keys[0][1]
        for (k0, a), (k1, b) in zip(keys, keys[1:]):
            if k0 <= step <= k1:
                return interpolate(a, b, (step - k0) / (k1 - k0))
        return keys[-1][1]

    def motion(self, step: int) -> RigidTransform:
        """Map-frame motion from ``step - 1`` to ``step``."""
        return self.pose_at(step) @ self.pose_at(step - 1).inverse()


@dataclass
class NoiseSpec:
    """Sensor and perception noise.

    Depth noise standard deviation is ``depth_a * d + depth_b``.
    ``id_switches`` entries ``(step, from_id, to_id)`` relabel an instance
    from that step onward. Transform noise is a per-axis rotation standard
    deviation (degrees) and translation standard deviation (meters).
    """

    depth_a: float = 0.0
    depth_b: float = 0.0
    mislabel_prob: float = 0.0
    missed_prob: float = 0.0
    id_switches: list[tuple[int, int, int]] = field(default_factory=list)
    rot_std_deg: float = 0.0
    trans_std: float = 0.0
    pixel_speckle: float = 0.0

    def __post_init__(self):
        for name in ("mislabel_prob", "missed_prob", "pixel_speckle"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("depth_a", "depth_b", "rot_std_deg", "trans_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.id_switches = [tuple(int(x) for x in s) for s in self.id_switches]

    def observed_id(self, true_id: int, step: int) -> int:
        out = true_id
        for s, a, b in sorted(self.id_switches):
            if step >= s and out == a:
                out = b
        return out

    def to_dict(self) -> dict:
        return {"depth_a": self.depth_a, "depth_b": self.depth_b,
                "mislabel_prob": self.mislabel_prob, "missed_prob": self.missed_prob,
                "id_switches": [list(s) for s in self.id_switches],
                "rot_std_deg": self.rot_std_deg, "trans_std": self.trans_std,
                "pixel_speckle": self.pixel_speckle}


@dataclass
class Scene:
    camera: CameraModel
    objects: list[SceneObject]
    camera_keyframes: list[tuple[int, RigidTransform]]
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    frames: int = 50
    name: str = "scene"

    def __post_init__(self):
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate instance ids in scene")
        self.camera_keyframes = sorted(self.camera_keyframes, key=lambda kv: kv[0])

    def camera_pose(self, step: int) -> Pose:
        rig = SceneObject(0, "camera", Box(), self.camera_keyframes)
        return Pose(rig.pose_at(step), step)

    def object(self, instance_id: int) -> SceneObject:
        for o in self.objects:
            if o.instance_id == instance_id:
                return o
        raise KeyError(instance_id)

    def labels(self) -> dict[int, InstanceLabel]:
        return {o.instance_id: InstanceLabel(o.semantic_label, o.background) for o in self.objects}


# -- rendering --------------------------------------------------------------------------

def trace(scene: Scene, pose: Pose, step: int, cam: CameraModel | None = None):
    """Noiseless z-depth and true instance id per pixel (0 where nothing is hit)."""
    cam = cam or scene.camera
    dirs_cam = cam.pixel_directions().reshape(-1, 3)
    R = pose.transform.rotation
    d_map = dirs_cam @ R.T
    o_map = pose.position
    best = np.full(len(d_map), np.inf)
    ids = np.zeros(len(d_map), dtype=np.uint32)
    for obj in scene.objects:
        T = obj.pose_at(step)
        Rt = T.rotation.T
        o_loc = (o_map - T.translation) @ Rt.T
        d_loc = d_map @ Rt.T
        t = obj.shape.intersect(np.broadcast_to(o_loc, d_loc.shape).copy(), d_loc)
        closer = t < best
        best = np.where(closer, t, best)
        ids[closer] = obj.instance_id
    # direction z-component is 1 in the camera frame, so t is z-depth
    depth = np.where(np.isfinite(best) & (best <= cam.max_range), best, 0.0)
    ids[depth == 0] = 0
    return depth.reshape(cam.shape), ids.reshape(cam.shape)


def _noisy_transform(T: RigidTransform, noise: NoiseSpec, rng) -> RigidTransform:
    if noise.rot_std_deg == 0 and noise.trans_std == 0:
        return T
    rv = rng.normal(0.0, math.radians(noise.rot_std_deg), 3)
    dt = rng.normal(0.0, noise.trans_std, 3)
    return RigidTransform.from_rotvec(rv, dt) @ T


def render_frame(scene: Scene, cam: CameraModel, pose: Pose, step: int,
                 noise: NoiseSpec, rng: np.random.Generator) -> MeasurementFrame:
    """Depth and instance images plus tracked transforms for one step.

    Random draws happen in a fixed order (depth noise, then per-object
    events in id order, then transform noise) so a seed fixes the frame.
    """
    depth, true_ids = trace(scene, pose, step, cam)
    hit = depth > 0
    sd = noise.depth_a * depth + noise.depth_b
    eps = rng.normal(size=depth.shape)
    if np.any(sd > 0):
        depth = np.where(hit, np.maximum(depth + sd * eps, 1e-3), 0.0)
    ids = true_ids.copy()
    labels = {}
    transforms = {}
    next_fake = 1_000_000 + step * 1000
    for obj in sorted(scene.objects, key=lambda o: o.instance_id):
        u_miss, u_mis = rng.random(2)
        mask = true_ids == obj.instance_id
        oid = noise.observed_id(obj.instance_id, step)
        if not obj.background:
            if u_miss < noise.missed_prob:
                oid = 0
            elif u_mis < noise.mislabel_prob:
                oid = next_fake
                next_fake += 1
        ids[mask] = oid
        if oid == 0 or not mask.any():
            continue
        labels[oid] = InstanceLabel(obj.semantic_label, obj.background)
        if obj.movable and not obj.background:
            transforms[oid] = _noisy_transform(obj.motion(step), noise, rng)
    if noise.pixel_speckle > 0:
        flip = (rng.random(ids.shape) < noise.pixel_speckle) & hit
        ids[flip] = 0
    return MeasurementFrame(step, pose, cam, depth.astype(np.float32), ids, transforms, labels)


def render_sequence(scene: Scene, seed: int = 0, frames: int | None = None,
                    cam: CameraModel | None = None) -> Iterator[MeasurementFrame]:
    rng = np.random.default_rng(seed)
    cam = cam or scene.camera
    n = scene.frames if frames is None else frames
    for k in range(n):
        yield render_frame(scene, cam, scene.camera_pose(k), k, scene.noise, rng)


# -- ground truth ---------------------------------------------------------------------------

@dataclass
class GroundTruthMap:
    """Labeled voxels at one step; ``movable`` marks voxels of movable objects."""

    step: int
    voxels: np.ndarray
    instance_id: np.ndarray
    semantic: np.ndarray
    movable: np.ndarray
    l_voxel: float
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.voxels)

    def centers(self, mask=None) -> np.ndarray:
        v = self.voxels if mask is None else self.voxels[mask]
        return self.origin + (v + 0.5) * self.l_voxel

    def to_text(self, path) -> None:
        lines = [f"# ground truth step {self.step}", f"# l_voxel {float(self.l_voxel)!r}",
                 "# origin " + " ".join(repr(float(x)) for x in self.origin),
                 "# ix iy iz instance_id semantic_label movable"]
        for v, i, s, m in zip(self.voxels.tolist(), self.instance_id.tolist(),
                              self.semantic.tolist(), self.movable.tolist()):
            lines.append(f"{v[0]} {v[1]} {v[2]} {i} {s} {int(m)}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_text(cls, path) -> "GroundTruthMap":
        step, l, origin, rows = 0, None, np.zeros(3), []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "#":
                    if parts[1:3] == ["ground", "truth"]:
                        step = int(parts[4])
                    elif parts[1] == "l_voxel":
                        l = float(parts[2])
                    elif parts[1] == "origin":
                        origin = np.array([float(x) for x in parts[2:5]])
                    continue
                rows.append(parts)
        if l is None:
            raise ValueError(f"{path}: missing l_voxel")
        vox = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 3)
        return cls(step, vox, np.array([int(r[3]) for r in rows], dtype=np.int64),
                   np.array([r[4] for r in rows], dtype=object),
                   np.array([r[5] == "1" for r in rows], dtype=bool), l, origin)


class GroundTruthBuilder:
    """Accumulates noiseless surface points and voxelizes them per step.

    Points on movable objects are kept in the object's local frame and
    carried to its pose at the evaluated step, so moving objects leave no
    stale voxels. Labels are decided by majority vote over points.
    """

    def __init__(self, scene: Scene, l_voxel: float, origin=(0.0, 0.0, 0.0),
                 cam: CameraModel | None = None):
        self.scene = scene
        self.cam = cam or scene.camera
        self.l_voxel = float(l_voxel)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.q = self.l_voxel / 8.0
        self.static_pts: dict[int, np.ndarray] = {}
        self.local_pts: dict[int, np.ndarray] = {}

    def _merge(self, store: dict, iid: int, pts: np.ndarray):
        if iid in store:
            pts = np.concatenate([store[iid], pts])
        key = np.floor(pts / self.q).astype(np.int64)
        _, first = np.unique(key, axis=0, return_index=True)
        store[iid] = pts[np.sort(first)]

    def observe(self, pose: Pose, step: int) -> None:
        depth, ids = trace(self.scene, pose, step, self.cam)
        valid = depth > 0
        v, u = np.nonzero(valid)
        pts = pose.to_map(self.cam.unproject(u + 0.5, v + 0.5, depth[valid]))
        pid = ids[valid]
        for iid in np.unique(pid).tolist():
            obj = self.scene.object(iid)
            p = pts[pid == iid]
            if obj.movable and not obj.background:
                self._merge(self.local_pts, iid, obj.pose_at(step).inverse().apply(p))
            else:
                self._merge(self.static_pts, iid, p)

    def observe_all_around(self, instance_id: int, views: int = 40, distance: float = 6.0) -> None:
        """Add an object's whole surface by viewing it alone from all around.

        Used when the reference should include sides the sensor never sees.
        """
        from .memory import fibonacci_sphere
        obj = self.scene.object(instance_id)
        alone = Scene(self.cam, [obj], self.scene.camera_keyframes, NoiseSpec(), 1, "alone")
        T0 = obj.pose_at(0)
        center = T0.translation
        for d in fibonacci_sphere(views):
            eye = center + distance * d
            up = (1.0, 0.0, 0.0) if abs(d[2]) > 0.95 else (0.0, 0.0, 1.0)
            pose = Pose(look_at(eye, center, up), 0)
            depth, ids = trace(alone, pose, 0, self.cam)
            valid = (depth > 0) & (ids == instance_id)
            if not valid.any():
                continue
            v, u = np.nonzero(valid)
            pts = pose.to_map(self.cam.unproject(u + 0.5, v + 0.5, depth[valid]))
            if obj.movable and not obj.background:
                self._merge(self.local_pts, instance_id, T0.inverse().apply(pts))
            else:
                self._merge(self.static_pts, instance_id, pts)

    def voxelize(self, step: int, bounds: tuple[np.ndarray, np.ndarray] | None = None) -> GroundTruthMap:
        pts, pid = [], []
        for iid, p in sorted(self.static_pts.items()):
            pts.append(p)
            pid.append(np.full(len(p), iid))
        for iid, p in sorted(self.local_pts.items()):
            pts.append(self.scene.object(iid).pose_at(step).apply(p))
            pid.append(np.full(len(p), iid))
        l, o = self.l_voxel, self.origin
        if not pts:
            z = np.zeros((0, 3), np.int64)
            return GroundTruthMap(step, z, np.zeros(0, np.int64), np.zeros(0, object),
                                  np.zeros(0, bool), l, o)
        P = np.concatenate(pts)
        I = np.concatenate(pid).astype(np.int64)
        if bounds is not None:
            inb = np.all((P >= bounds[0]) & (P < bounds[1]), axis=1)
            P, I = P[inb], I[inb]
        g = np.floor((P - o) / l).astype(np.int64)
        return _majority(step, g, I, self.scene, l, o)


def _majority(step, g, ids, scene: Scene, l, origin) -> GroundTruthMap:
    if len(g) == 0:
        z = np.zeros((0, 3), np.int64)
        return GroundTruthMap(step, z, np.zeros(0, np.int64), np.zeros(0, object),
                              np.zeros(0, bool), l, origin)
    vox, vinv = np.unique(g, axis=0, return_inverse=True)
    vinv = vinv.reshape(-1)
    pair = np.stack([vinv, ids], axis=1)
    up, cnt = np.unique(pair, axis=0, return_counts=True)
    # per voxel: highest count, ties -> smaller id (rows sorted by id)
    order = np.lexsort((up[:, 1], -cnt, up[:, 0]))
    up = up[order]
    first = np.ones(len(up), dtype=bool)
    first[1:] = up[1:, 0] != up[:-1, 0]
    winner = up[first, 1]
    sem = np.array([scene.object(int(i)).semantic_label for i in winner], dtype=object)
    mov = np.array([scene.object(int(i)).movable and not scene.object(int(i)).background
                    for i in winner], dtype=bool)
    return GroundTruthMap(step, vox, winner.astype(np.int64), sem, mov, l, origin)


def build_ground_truth(scene: Scene, poses: list[Pose], steps: Iterable[int], l_voxel: float,
                       origin=(0.0, 0.0, 0.0), bounds_fn=None,
                       cam: CameraModel | None = None) -> list[GroundTruthMap]:
    """Ground-truth maps for each step, from points observed at steps 0..k.

    ``bounds_fn(step)`` may return ``(lo, hi)`` map-frame limits of the local
    map at that step.
    """
    b = GroundTruthBuilder(scene, l_voxel, origin, cam)
    out = []
    for k in steps:
        b.observe(poses[k], k)
        out.append(b.voxelize(k, None if bounds_fn is None else bounds_fn(k)))
    return out


# -- scene files ------------------------------------------------------------------------------

def _transform_from_dict(d: dict) -> RigidTransform:
    t = d.get("translation", [0.0, 0.0, 0.0])
    if "look_at" in d:
        return look_at(d.get("position", t), d["look_at"])
    return RigidTransform.from_euler("xyz", d.get("euler_deg", [0.0, 0.0, 0.0]), t)


def _transform_to_dict(T: RigidTransform) -> dict:
    from scipy.spatial.transform import Rotation
    return {"translation": [float(x) for x in T.translation],
            "euler_deg": [float(x) for x in Rotation.from_matrix(T.rotation).as_euler("xyz", degrees=True)]}


def scene_to_dict(scene: Scene) -> dict:
    c = scene.camera
    return {
        "name": scene.name,
        "frames": scene.frames,
        "camera": {"f": c.f, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height,
                   "max_range": c.max_range},
        "camera_trajectory": [dict(step=k, **_transform_to_dict(T)) for k, T in scene.camera_keyframes],
        "objects": [{
            "id": o.instance_id, "label": o.semantic_label, "shape": o.shape.to_dict(),
            "movable": o.movable, "background": o.background,
            "keyframes": [dict(step=k, **_transform_to_dict(T)) for k, T in o.keyframes],
        } for o in scene.objects],
        "noise": scene.noise.to_dict(),
    }


def scene_from_dict(d: dict) -> Scene:
    known = {"name", "frames", "camera", "camera_trajectory", "objects", "noise"}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown scene keys: {sorted(extra)}")
    c = d["camera"]
    cam = CameraModel(float(c["f"]), float(c["cx"]), float(c["cy"]), int(c["width"]),
                      int(c["height"]), float(c.get("max_range", 20.0)))
    traj = [(int(k["step"]), _transform_from_dict(k)) for k in d["camera_trajectory"]]
    objs = []
    for o in d.get("objects", []):
        keys = [(int(k["step"]), _transform_from_dict(k)) for k in o["keyframes"]]
        objs.append(SceneObject(int(o["id"]), str(o["label"]), shape_from_dict(o["shape"]), keys,
                                bool(o.get("movable", True)), bool(o.get("background", False))))
    noise = NoiseSpec(**d.get("noise", {}))
    return Scene(cam, objs, traj, noise, int(d.get("frames", 50)), str(d.get("name", "scene")))


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scene_to_dict(scene), fh, sort_keys=False)


# -- recorded sequence layout ---------------------------------------------------------------

GRID_MAGIC = b"PHDG"
GRID_VERSION = 1
GRID_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u4")}
_GRID_HEADER = struct.Struct("<4sIIII")


def write_grid(path, arr: np.ndarray) -> None:
    """Binary grid: magic, version, dtype code, height, width (LE u32), then rows."""
    a = np.asarray(arr)
    code = 1 if a.dtype.kind == "f" else 2
    data = np.ascontiguousarray(a, dtype=GRID_DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, code, a.shape[0], a.shape[1]))
        fh.write(data.tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_GRID_HEADER.size)
        if len(head) != _GRID_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, ver, code, h, w = _GRID_HEADER.unpack(head)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if ver != GRID_VERSION:
            raise ValueError(f"{path}: unsupported version {ver}")
        if code not in GRID_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dt = GRID_DTYPES[code]
        body = fh.read()
    if len(body) != h * w * dt.itemsize:
        raise ValueError(f"{path}: expected {h}x{w} values, found {len(body) // dt.itemsize}")
    return np.frombuffer(body, dtype=dt).reshape(h, w).copy()


def _fmt_T(T: RigidTransform) -> str:
    return " ".join(repr(float(x)) for x in T.matrix[:3, :].ravel())


def _parse_T(vals: list[str], where: str) -> RigidTransform:
    if len(vals) != 12:
        raise ValueError(f"{where}: expected 12 matrix values, got {len(vals)}")
    try:
        return RigidTransform.from_matrix(np.array([float(x) for x in vals]).reshape(3, 4))
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None


def write_sequence(directory, frames: Iterable[MeasurementFrame],
                   ground_truth: Iterable[GroundTruthMap] = ()) -> int:
    """Write frames in the replay layout; returns the frame count.

    Layout: ``camera.txt``, ``labels.txt`` (id label background),
    ``poses.txt`` (step + row-major 3x4 camera-to-map), ``transforms.txt``
    (step id + 3x4), ``depth/NNNNNN.bin``, ``ids/NNNNNN.bin`` and optionally
    ``gt/NNNNNN.txt``.
    """
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    os.makedirs(os.path.join(directory, "ids"), exist_ok=True)
    labels: dict[int, InstanceLabel] = {}
    pose_lines, tf_lines = [], []
    cam = None
    n = 0
    for fr in frames:
        cam = fr.camera
        write_grid(os.path.join(directory, "depth", f"{fr.step:06d}.bin"), fr.depth)
        write_grid(os.path.join(directory, "ids", f"{fr.step:06d}.bin"), fr.ids)
        pose_lines.append(f"{fr.step} {_fmt_T(fr.pose.transform)}")
        for iid in sorted(fr.transforms):
            tf_lines.append(f"{fr.step} {iid} {_fmt_T(fr.transforms[iid])}")
        labels.update(fr.labels)
        n += 1
    gts = list(ground_truth)
    if gts:
        os.makedirs(os.path.join(directory, "gt"), exist_ok=True)
        for g in gts:
            g.to_text(os.path.join(directory, "gt", f"{g.step:06d}.txt"))
    with open(os.path.join(directory, "poses.txt"), "w") as fh:
        fh.write("".join(line + "\n" for line in pose_lines))
    with open(os.path.join(directory, "transforms.txt"), "w") as fh:
        fh.write("".join(line + "\n" for line in tf_lines))
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        for iid in sorted(labels):
            fh.write(f"{iid} {labels[iid].semantic_label} {int(labels[iid].background)}\n")
    if cam is not None:
        with open(os.path.join(directory, "camera.txt"), "w") as fh:
            fh.write(" ".join([repr(float(cam.f)), repr(float(cam.cx)), repr(float(cam.cy)), str(int(cam.width)),
                               str(int(cam.height)), repr(float(cam.max_range))]) + "\n")
    return n


def read_camera(directory) -> CameraModel:
    path = os.path.join(directory, "camera.txt")
    vals = open(path).read().split()
    if len(vals) != 6:
        raise ValueError(f"{path}: expected 6 fields (f cx cy width height max_range)")
    return CameraModel(float(vals[0]), float(vals[1]), float(vals[2]), int(vals[3]), int(vals[4]),
                       float(vals[5]))


def read_sequence(directory) -> Iterator[MeasurementFrame]:
    """Frames in step order from a replay directory; malformed files raise ValueError."""
    path = os.path.join(directory, "poses.txt")
    if not os.path.exists(path):
        return
    cam = read_camera(directory)
    labels = {}
    lpath = os.path.join(directory, "labels.txt")
    if os.path.exists(lpath):
        for ln, line in enumerate(open(lpath), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{lpath}:{ln}: expected 'id label background'")
            labels[int(parts[0])] = InstanceLabel(parts[1], parts[2] == "1")
    poses = {}
    for ln, line in enumerate(open(path), 1):
        parts = line.split()
        if parts:
            poses[int(parts[0])] = _parse_T(parts[1:], f"{path}:{ln}")
    tfs: dict[int, dict[int, RigidTransform]] = {}
    tpath = os.path.join(directory, "transforms.txt")
    if os.path.exists(tpath):
        for ln, line in enumerate(open(tpath), 1):
            parts = line.split()
            if parts:
                tfs.setdefault(int(parts[0]), {})[int(parts[1])] = _parse_T(parts[2:], f"{tpath}:{ln}")
    for k in sorted(poses):
        depth = read_grid(os.path.join(directory, "depth", f"{k:06d}.bin"))
        ids = read_grid(os.path.join(directory, "ids", f"{k:06d}.bin"))
        if depth.shape != cam.shape:
            raise ValueError(f"depth/{k:06d}.bin: shape {depth.shape} != camera {cam.shape}")
        present = {int(i) for i in np.unique(ids)} - {0}
        lab = {i: labels.get(i, InstanceLabel("unknown")) for i in present}
        yield MeasurementFrame(k, Pose(poses[k], k), cam, depth, ids, tfs.get(k, {}), lab)


def read_ground_truth(directory) -> list[GroundTruthMap]:
    gdir = os.path.join(directory, "gt")
    if not os.path.isdir(gdir):
        return []
    return [GroundTruthMap.from_text(os.path.join(gdir, n)) for n in sorted(os.listdir(gdir))
            if n.endswith(".txt")]


# -- built-in scenes -----------------------------------------------------------------------------

def _ground(size=12.0, iid=2) -> SceneObject:
    # top face at z = 0.1 sits mid-voxel for the default 0.2 m grid
    return SceneObject(iid, "ground", Box((size, size, 0.2)),
                       [(0, RigidTransform.from_translation((0.0, 0.0, 0.0)))],
                       movable=False, background=True)


def _cam(width=160, height=120, f=None, max_range=20.0) -> CameraModel:
    f = float(width) if f is None else f
    return CameraModel(f, width / 2.0, height / 2.0, width, height, max_range)


def demo_scene(frames: int = 30, width: int = 160, height: int = 120) -> Scene:
    """Ground, a static cylinder and a box crossing the view."""
    cam = _cam(width, height)
    eye = (-3.0, 0.0, 1.5)
    objs = [
        _ground(),
        SceneObject(100, "car", Box((1.0, 1.0, 1.0)),
                    [(0, RigidTransform.from_translation((1.0, -2.0, 0.5))),
                     (frames, RigidTransform.from_translation((1.0, 2.0, 0.5)))]),
        SceneObject(101, "barrel", Cylinder(0.4, 1.0),
                    [(0, RigidTransform.from_translation((2.5, 1.0, 0.5)))]),
    ]
    return Scene(cam, objs, [(0, look_at(eye, (1.5, 0.0, 0.3)))], NoiseSpec(), frames, "demo")


def trace_scene(frames: int = 20, l_voxel: float = 0.2, width: int = 160, height: int = 120) -> Scene:
    """A 1 m box sliding one voxel per frame across a static backdrop."""
    cam = _cam(width, height)
    start = np.array([2.0, -1.6, 0.6])
    objs = [
        _ground(),
        SceneObject(3, "wall", Box((0.2, 8.0, 3.0)),
                    [(0, RigidTransform.from_translation((4.2, 0.0, 1.6)))],
                    movable=False, background=True),
        SceneObject(100, "car", Box((1.0, 1.0, 1.0)),
                    [(0, RigidTransform.from_translation(start)),
                     (frames, RigidTransform.from_translation(start + (0.0, frames * l_voxel, 0.0)))]),
    ]
    return Scene(cam, objs, [(0, look_at((-1.0, 0.0, 1.6), (2.0, 0.0, 0.5)))], NoiseSpec(), frames, "trace")


def static_scene(frames: int = 100, width: int = 160, height: int = 120) -> Scene:
    """Five static objects of three classes viewed by a slowly panning camera."""
    cam = _cam(width, height)
    objs = [
        _ground(),
        SceneObject(100, "car", Box((1.2, 0.8, 0.8)), [(0, RigidTransform.from_translation((3.1, -1.5, 0.5)))]),
        SceneObject(101, "car", Box((1.0, 1.0, 0.6)), [(0, RigidTransform.from_translation((4.0, 1.2, 0.4)))]),
        SceneObject(102, "barrel", Cylinder(0.37, 1.0), [(0, RigidTransform.from_translation((2.5, 0.5, 0.6)))]),
        SceneObject(103, "barrel", Cylinder(0.34, 0.8), [(0, RigidTransform.from_translation((5.0, -0.4, 0.5)))]),
        SceneObject(104, "ball", Sphere(0.38), [(0, RigidTransform.from_translation((3.5, -0.1, 0.48)))]),
    ]
    eye0, eye1 = (-0.5, -1.0, 1.8), (-0.5, 1.0, 1.8)
    keys = [(0, look_at(eye0, (3.5, 0.0, 0.4))), (frames, look_at(eye1, (3.5, 0.0, 0.4)))]
    return Scene(cam, objs, keys, NoiseSpec(), frames, "static")


def switch_scene(frames: int = 16, switch_step: int = 8, new_id: int = 150,
                 l_voxel: float = 0.2, width: int = 64, height: int = 48) -> Scene:
    """A box receding one voxel per frame whose id changes at ``switch_step``.

    The box moves along the viewing direction, so every face seen before
    the switch stays in view after it.
    """
    cam = _cam(width, height)
    start = np.array([2.0, 0.0, 0.8])
    objs = [
        _ground(),
        SceneObject(100, "car", Box((1.0, 1.0, 1.0)),
                    [(0, RigidTransform.from_translation(start)),
                     (frames, RigidTransform.from_translation(start + (frames * l_voxel, 0.0, 0.0)))]),
    ]
    noise = NoiseSpec(id_switches=[(switch_step, 100, new_id)])
    return Scene(cam, objs, [(0, look_at((-0.5, 0.0, 0.8), (3.0, 0.0, 0.8)))], noise, frames, "switch")


def memory_scene(frames: int = 50, seed: int = 0, width: int = 160, height: int = 120,
                 reentry_step: int = 30) -> Scene:
    """A car seen from all sides on a turntable, then a same-shaped car seen later.

    The first car (id 100) turns a full circle under a raised camera, then
    drives out of view. The camera then drops to car height and at
    ``reentry_step`` a second car (id 200) appears straight ahead, seen from
    behind, and turns on the spot, revealing its other sides gradually. The
    seed sets its distance and turning direction.
    """
    rng = np.random.default_rng(seed)
    cam = _cam(width, height)
    size = (1.2, 0.8, 0.8)
    home = np.array([3.1, 0.1, 0.5])
    turn = 24
    keys_a = [(k, RigidTransform.from_euler("z", [2.0 * math.pi * k / turn], translation=home, degrees=False))
              for k in range(0, turn + 1, turn // 4)]
    keys_a.append((turn + 4, RigidTransform.from_translation(home + (0.0, -8.0, 0.0))))
    spot = home + (0.2 * int(rng.integers(0, 4)), 0.0, 0.0)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    far = RigidTransform.from_translation((40.0, 40.0, 0.5))
    span = frames - 1 - reentry_step
    keys_b = [(0, far), (reentry_step - 1, far)]
    for j in range(4):
        k = reentry_step + round(span * j / 3)
        keys_b.append((k, RigidTransform.from_euler("z", [sign * 0.5 * math.pi * j], translation=spot,
                                                    degrees=False)))
    objs = [
        _ground(),
        SceneObject(100, "car", Box(size), keys_a),
        SceneObject(200, "car", Box(size), keys_b),
    ]
    high = look_at((-0.5, 0.1, 2.2), home)
    low = look_at((-0.5, 0.1, 0.7), (home[0], 0.1, 0.7))
    keys = [(0, high), (turn + 4, high), (reentry_step - 1, low)]
    return Scene(cam, objs, keys, NoiseSpec(), frames, "memory")


SCENES = {"demo": demo_scene, "trace": trace_scene, "static": static_scene, "switch": switch_scene,
          "memory": memory_scene}


def builtin_scene(name: str, **kw) -> Scene:
    try:
        return SCENES[name](**kw)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None
