"""Slow, direct reference computations used to check the fast paths."""

from __future__ import annotations

import math

import numpy as np

from phdmap.filter import FilterParams, gaussian_density
from phdmap.particle_store import ParticleGrid
from phdmap.geometry import CameraModel, Pose, RigidTransform


def id_factor(zid, pid, plast, step, params: FilterParams):
    if zid == pid:
        return 1.0
    if params.update_mode == "if":
        return 0.0
    f = params.p_tr
    if params.use_forgetting:
        dk = step - plast
        f *= math.exp(-dk / params.forget_speed) if dk <= params.forget_horizon else 0.0
    return f


def full_sum_update(pos, ids, w, last, zpos, zids, zsig, params: FilterParams, step):
    """Posterior weights summing every measurement over every particle."""
    n, m = len(w), len(zids)
    g = np.zeros((m, n))
    fac = np.zeros((m, n))
    for a in range(m):
        g[a] = gaussian_density(zpos[a], pos, zsig[a])
        for b in range(n):
            fac[a, b] = id_factor(int(zids[a]), int(ids[b]), int(last[b]), step, params)
    C = (params.p_d * fac * g * w[None, :]).sum(axis=1)
    gain = (params.p_d * fac * g / (params.clutter + C)[:, None]).sum(axis=0)
    return (1.0 - params.p_d + gain) * w


def visible_oracle(grid: ParticleGrid, cam: CameraModel, pose: Pose, depth, slack) -> set[int]:
    """Particles that project into the image in front of measured depth + slack."""
    out = set()
    d = np.asarray(depth, dtype=np.float64)
    for i in grid.live().tolist():
        pc = pose.to_camera(grid.pos[i][None])[0]
        uv = cam.project(pc)
        if uv is None:
            continue
        u, v = int(math.floor(uv[0])), int(math.floor(uv[1]))
        meas = d[v, u]
        if not (np.isfinite(meas) and 0 < meas <= cam.max_range):
            meas = cam.max_range
        margin = slack(meas) if callable(slack) else slack
        if pc[2] < meas + margin:
            out.add(i)
    return out


def sampled_extent(x1, y1, z1, l, f, cx, cy, n=200_001):
    """Pixel extent of a sphere's projection from dense sampling of its outline.

    The sphere's shadow on the x-z plane is the disk of radius ``l``, so
    sweeping the circle ``(x1 + l sin a, z1 + l cos a)`` covers every
    attainable ``x / z``; likewise for ``y``.
    """
    a = np.linspace(0.0, 2.0 * math.pi, n)
    u = f * (x1 + l * np.sin(a)) / (z1 + l * np.cos(a)) + cx
    v = f * (y1 + l * np.sin(a)) / (z1 + l * np.cos(a)) + cy
    return u.min(), u.max(), v.min(), v.max()


def micro_scene(rng, params: FilterParams, cam: CameraModel | None = None, max_particles=50,
                max_meas=5, step=6):
    """Random handful of particles and measurements in front of a small camera."""
    from phdmap.measurement import InstanceLabel, MeasurementFrame
    cam = cam or CameraModel(32.0, 16.0, 12.0, 32, 24, 20.0)
    pose = Pose(RigidTransform.from_rotvec(rng.normal(scale=0.2, size=3), rng.normal(scale=0.5, size=3)), step)
    k = int(rng.integers(1, max_meas + 1))
    flat = rng.choice(cam.width * cam.height, k, replace=False)
    v, u = np.divmod(flat, cam.width)
    d = rng.uniform(1.0, 6.0, k)
    zid = rng.integers(2, 5, k)
    depth = np.zeros(cam.shape, np.float32)
    idimg = np.zeros(cam.shape, np.uint32)
    depth[v, u] = d
    idimg[v, u] = zid
    labels = {int(i): InstanceLabel("thing") for i in range(2, 6)}
    frame = MeasurementFrame(step, pose, cam, depth, idimg, {}, labels)
    grid = ParticleGrid(m=6, l_voxel=0.5, capacity=64, sensor_position=pose.position)
    n = int(rng.integers(1, max_particles + 1))
    near = rng.random(n) < 0.6
    src = rng.integers(0, k, n)
    sig = params.sigma(frame.point_depths)
    pos = np.where(near[:, None],
                   frame.points[src] + rng.normal(size=(n, 3)) * 3.0 * sig[src, None],
                   pose.to_map(cam.unproject(rng.uniform(0, cam.width, n), rng.uniform(0, cam.height, n),
                                             rng.uniform(0.5, 7.0, n))))
    grid.insert(pos, rng.integers(2, 6, n), rng.uniform(0.01, 1.0, n),
                rng.integers(0, step + 1, n), rng, step=0)
    return grid, frame
