"""Update-indices image and per-measurement activation boxes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, Pose
from .particle_store import ParticleGrid

TWO_PI_32 = (2.0 * math.pi) ** 1.5


@dataclass
class UpdateIndicesImage:
    """Visible particles grouped by the pixel they project into.

    ``particles`` are pool indices sorted by flat pixel index; the particles
    of flat pixel ``p`` are ``particles[start[p]:start[p + 1]]``.
    """

    particles: np.ndarray
    pixel: np.ndarray
    depth: np.ndarray
    start: np.ndarray
    measured_depth: np.ndarray
    step: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.measured_depth.shape

    def __len__(self) -> int:
        return len(self.particles)

    def particles_at(self, u: int, v: int) -> np.ndarray:
        p = v * self.shape[1] + u
        return self.particles[self.start[p]:self.start[p + 1]]

    def count_grid(self) -> np.ndarray:
        return np.diff(self.start).reshape(self.shape)

    def dump_text(self, path) -> None:
        np.savetxt(path, self.count_grid(), fmt="%d",
                   header=f"visible particle count per pixel, step {self.step}")


@dataclass(frozen=True)
class ActivationBox:
    u_min: int
    u_max: int
    v_min: int
    v_max: int
    point: tuple[float, float, float]
    radius: float

    def contains(self, u: float, v: float) -> bool:
        return self.u_min <= math.floor(u) <= self.u_max and self.v_min <= math.floor(v) <= self.v_max


def activation_radius(depth, sigma_of_depth, eps: float = 1e-6):
    """Radius of the sphere where an isotropic Gaussian density exceeds ``eps``.

    ``sigma_of_depth`` is a callable returning the per-axis standard
    deviation at a depth. Returns 0 where the peak density is below ``eps``.
    """
    rho = np.asarray(sigma_of_depth(np.asarray(depth, dtype=np.float64)), dtype=np.float64)
    arg = 1.0 / (TWO_PI_32 * rho ** 3 * eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        l2 = 2.0 * rho ** 2 * np.log(arg)
    out = np.sqrt(np.where(arg > 1.0, l2, 0.0))
    return float(out) if out.ndim == 0 else out


def activation_extent(x1, y1, z1, l, f: float, cx: float, cy: float):
    """Continuous pixel extent of a sphere's projection (undilated, unclamped).

    Requires ``z1 > l``. Returns ``(u_min, u_max, v_min, v_max)``.
    """
    x1, y1, z1, l = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x1, y1, z1, l)))

    def span(a1):
        s = np.sqrt(np.maximum(a1 * a1 + z1 * z1 - l * l, 0.0))
        den = z1 - l
        lo = np.full(a1.shape, np.inf)
        hi = np.full(a1.shape, -np.inf)
        for sign in (1.0, -1.0):
            alpha = 2.0 * np.arctan((a1 + sign * s) / den)
            val = (a1 + l * np.sin(alpha)) / (z1 + l * np.cos(alpha))
            lo = np.minimum(lo, val)
            hi = np.maximum(hi, val)
        return lo, hi

    ulo, uhi = span(x1)
    vlo, vhi = span(y1)
    return f * ulo + cx, f * uhi + cx, f * vlo + cy, f * vhi + cy


def activation_boxes(cam: CameraModel, p_cam: np.ndarray, radius: np.ndarray,
                     n_pix: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Integer inclusive pixel boxes for many measurements.

    Returns ``(boxes, fallback)`` with ``boxes`` of shape ``(N, 4)`` holding
    ``u_min, u_max, v_min, v_max`` and ``fallback`` marking measurements whose
    sphere is not strictly in front of the camera (given the full image).
    """
    p = np.asarray(p_cam, dtype=np.float64).reshape(-1, 3)
    l = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(p),))
    ok = p[:, 2] > l
    boxes = np.empty((len(p), 4), dtype=np.int64)
    boxes[:] = (0, cam.width - 1, 0, cam.height - 1)
    if ok.any():
        u0, u1, v0, v1 = activation_extent(p[ok, 0], p[ok, 1], p[ok, 2], l[ok], cam.f, cam.cx, cam.cy)
        b = np.stack([np.floor(u0) - n_pix, np.floor(u1) + n_pix,
                      np.floor(v0) - n_pix, np.floor(v1) + n_pix], axis=1)
        b[:, 0:2] = np.clip(b[:, 0:2], 0, cam.width - 1)
        b[:, 2:4] = np.clip(b[:, 2:4], 0, cam.height - 1)
        boxes[ok] = b.astype(np.int64)
    return boxes, ~ok


def activation_box(cam: CameraModel, P, l: float, n_pix: int = 5) -> ActivationBox:
    P = np.asarray(P, dtype=np.float64).reshape(3)
    boxes, fb = activation_boxes(cam, P[None], np.array([l]), n_pix)
    if fb[0]:
        warnings.warn("activation sphere reaches behind the camera; using the full image",
                      RuntimeWarning, stacklevel=2)
    b = boxes[0]
    return ActivationBox(int(b[0]), int(b[1]), int(b[2]), int(b[3]), tuple(P.tolist()), float(l))


def frustum_cells(grid: ParticleGrid, cam: CameraModel, pose: Pose,
                  codes: np.ndarray, far: float) -> np.ndarray:
    """Mask of cells whose bounding sphere touches the viewing frustum.

    Conservative: a cell containing any in-view point always passes.
    """
    g = grid.global_of_code(codes)
    c = pose.to_camera(grid.voxel_center(g))
    r = 0.5 * math.sqrt(3.0) * grid.l_voxel
    x, y, z = c[:, 0], c[:, 1], c[:, 2]
    f = cam.f
    ok = (z >= -r) & (z <= far + r)
    ok &= (f * x + cam.cx * z) / math.hypot(f, cam.cx) >= -r
    ok &= -(f * x + (cam.cx - cam.width) * z) / math.hypot(f, cam.width - cam.cx) >= -r
    ok &= (f * y + cam.cy * z) / math.hypot(f, cam.cy) >= -r
    ok &= -(f * y + (cam.cy - cam.height) * z) / math.hypot(f, cam.height - cam.cy) >= -r
    return ok


def build_indices_image(grid: ParticleGrid, cam: CameraModel, pose: Pose,
                        depth_image: np.ndarray, step: int = 0,
                        slack=None) -> UpdateIndicesImage:
    """Collect particles that are in view and not behind the measured surface.

    Invalid depth pixels count as the max sensing range. A particle is kept
    when its camera depth is below the pixel's measured depth plus ``slack``.
    ``slack`` is a distance in meters or a function of the measured depth;
    by default half a voxel diagonal.
    """
    if slack is None:
        slack = 0.5 * math.sqrt(3.0) * grid.l_voxel
    d = np.asarray(depth_image, dtype=np.float64)
    meas = np.where(np.isfinite(d) & (d > 0) & (d <= cam.max_range), d, cam.max_range)
    margin = np.broadcast_to(np.asarray(slack(meas) if callable(slack) else slack, dtype=np.float64),
                             meas.shape)
    live = grid.live()
    if len(live):
        cells = np.unique(grid.code[live])
        cell_ok = np.zeros(grid.n ** 3, dtype=bool)
        cell_ok[cells[frustum_cells(grid, cam, pose, cells, cam.max_range + float(margin.max()))]] = True
        cand = live[cell_ok[grid.code[live]]]
    else:
        cand = live
    pc = pose.to_camera(grid.pos[cand]) if len(cand) else np.zeros((0, 3))
    u, v, inview = cam.project_points(pc)
    cand, pc, u, v = cand[inview], pc[inview], u[inview], v[inview]
    pix = np.floor(v).astype(np.int64) * cam.width + np.floor(u).astype(np.int64)
    keep = pc[:, 2] < meas.ravel()[pix] + margin.ravel()[pix]
    cand, pix, z = cand[keep], pix[keep], pc[keep, 2]
    order = np.argsort(pix, kind="stable")
    cand, pix, z = cand[order], pix[order], z[order]
    start = np.searchsorted(pix, np.arange(cam.width * cam.height + 1), side="left")
    return UpdateIndicesImage(cand, pix, z, start, meas, step)
