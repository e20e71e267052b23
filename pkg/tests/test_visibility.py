from __future__ import annotations

import math

import numpy as np
import pytest

from phdmap.filter import FilterParams
from phdmap.geometry import CameraModel, Pose, RigidTransform
from phdmap.particle_store import ParticleGrid
from phdmap.visibility import (activation_box, activation_boxes, activation_extent,
                               activation_radius, build_indices_image, frustum_cells)
from phdmap.filter import gaussian_density

from oracles import micro_scene, sampled_extent, visible_oracle


def test_indices_image_matches_brute_force(rng):
    p = FilterParams()
    for _ in range(30):
        grid, frame = micro_scene(rng, p, max_particles=200)
        slack = lambda d: 3.0 * p.sigma(d)
        img = build_indices_image(grid, frame.camera, frame.pose, frame.depth, slack=slack)
        got = set(img.particles.tolist())
        assert got == visible_oracle(grid, frame.camera, frame.pose, frame.depth, slack)
        # per-pixel slices hold exactly the particles projecting there
        w = frame.camera.width
        for i in rng.choice(len(img.particles), min(20, len(img.particles)), replace=False) if len(img.particles) else []:
            pidx = int(img.particles[i])
            u, v, _ = frame.camera.project_points(frame.pose.to_camera(grid.pos[pidx][None]))
            assert pidx in img.particles_at(int(u[0]), int(v[0])).tolist()
        assert img.count_grid().sum() == len(img.particles)
        assert img.count_grid().shape == (frame.camera.height, w)


def test_frustum_cells_never_drop_visible_particles(rng):
    cam = CameraModel(40.0, 20.0, 15.0, 40, 30, 8.0)
    for _ in range(10):
        pose = Pose(RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3)))
        grid = ParticleGrid(m=5, l_voxel=0.4, capacity=64, sensor_position=pose.position)
        lo, hi = grid.bounds
        grid.insert(rng.uniform(lo, hi, (3000, 3)), 2, 1.0, 0, rng, step=0)
        live = grid.live()
        _, _, ok = cam.project_points(pose.to_camera(grid.pos[live]))
        z = pose.to_camera(grid.pos[live])[:, 2]
        inview = live[ok & (z <= cam.max_range)]
        cells = np.unique(grid.code[live])
        passed = set(cells[frustum_cells(grid, cam, pose, cells, cam.max_range)].tolist())
        assert set(grid.code[inview].tolist()) <= passed
        assert len(passed) < len(cells)


@pytest.mark.parametrize("eps", [1e-6, 1e-3])
def test_activation_radius_is_density_level(eps):
    p = FilterParams()
    for d in (0.5, 3.0, 15.0):
        r = activation_radius(d, p.sigma, eps)
        s = float(p.sigma(d))
        dens = gaussian_density(np.array([r, 0.0, 0.0]), np.zeros(3), s)
        assert dens == pytest.approx(eps, rel=1e-9)
    # a density whose peak is below eps has no support
    assert activation_radius(1.0, lambda d: np.full_like(d, 10.0), 1e-3) == 0.0


def test_activation_extent_contains_sampled_outline(rng):
    f, cx, cy = 300.0, 160.0, 120.0
    for _ in range(100):
        l = rng.uniform(0.01, 0.5)
        z = rng.uniform(l + 0.05, 10.0)
        x, y = rng.uniform(-z, z, 2)
        u0, u1, v0, v1 = activation_extent(x, y, z, l, f, cx, cy)
        s0, s1, t0, t1 = sampled_extent(x, y, z, l, f, cx, cy)
        assert u0 <= s0 + 1e-9 and u1 >= s1 - 1e-9 and v0 <= t0 + 1e-9 and v1 >= t1 - 1e-9
        assert s0 - u0 < 1e-3 and u1 - s1 < 1e-3


def test_activation_boxes_dilate_clamp_and_fall_back():
    cam = CameraModel(100.0, 50.0, 40.0, 100, 80)
    boxes, fb = activation_boxes(cam, np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.05], [50.0, 0.0, 1.0]]),
                                 np.array([0.1, 0.1, 0.1]), n_pix=5)
    assert fb.tolist() == [False, True, False]
    u0, u1, v0, v1 = activation_extent(0.0, 0.0, 2.0, 0.1, 100.0, 50.0, 40.0)
    assert boxes[0].tolist() == [math.floor(u0) - 5, math.floor(u1) + 5, math.floor(v0) - 5, math.floor(v1) + 5]
    assert boxes[1].tolist() == [0, 99, 0, 79]
    assert boxes[2, 0] == 99 and boxes[2, 1] == 99
    with pytest.warns(RuntimeWarning):
        b = activation_box(cam, (0.0, 0.0, 0.05), 0.1)
    assert (b.u_min, b.u_max) == (0, 99)
    assert activation_box(cam, (0.0, 0.0, 2.0), 0.1).contains(50.2, 40.7)
