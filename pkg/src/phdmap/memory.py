"""Template library of fully observed instances and PHD-based shape matching.

A template is the particle set of an instance whose voxels block almost
every ray cast from their mass center. When a new instance with the same
semantic label appears, its measurement points (and the free space seen
in front of them) are matched against the stored templates; the best
placement seeds extra newborn particles in the still-occluded parts.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform
from .measurement import MeasurementFrame
from .particle_store import InstanceRegistry, ParticleGrid

log = logging.getLogger(__name__)

TEMPLATE_MAGIC = "PHDMAP-TEMPLATE"
TEMPLATE_VERSION = 1
TEMPLATE_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("weight", "<f8")])


@dataclass
class Template:
    """Particles of one instance in a frame centered on its voxel mass center.

    ``anchor`` is the map-frame mass center at storage time, so
    ``positions + anchor`` recovers where the particles were.
    """

    semantic_label: str
    positions: np.ndarray
    weights: np.ndarray
    source_id: int
    created_step: int
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.anchor = np.asarray(self.anchor, dtype=np.float64).reshape(3)
        if len(self.positions) != len(self.weights):
            raise ValueError("positions and weights differ in length")
        if np.any(self.weights < 0):
            raise ValueError("template weights must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.weights)

    def placed(self, T: RigidTransform) -> np.ndarray:
        return T.apply(self.positions)


@dataclass
class MatchResult:
    template: Template
    transform: RigidTransform
    score: float


class TemplateLibrary:
    """Templates grouped by semantic label."""

    def __init__(self):
        self.by_label: dict[str, list[Template]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_label.values())

    def __iter__(self):
        for label in sorted(self.by_label):
            yield from self.by_label[label]

    def templates(self, semantic_label: str) -> list[Template]:
        return list(self.by_label.get(semantic_label, ()))

    def add(self, template: Template, l_voxel: float, prune_ratio: float = 0.95) -> bool:
        """Store ``template`` unless a same-label template already explains it.

        An existing template counts as a duplicate when, placed at the new
        template's anchor, it scores at least ``prune_ratio`` times the new
        template's own score on the new template's evidence.
        """
        if template.size == 0:
            raise ValueError("cannot store an empty template")
        same = self.by_label.setdefault(template.semantic_label, [])
        if same:
            ev = template_evidence(template, l_voxel)
            at = RigidTransform.from_translation(template.anchor)
            own = similarity(ev, template, at)
            for other in same:
                if similarity(ev, other, at) >= prune_ratio * own:
                    return False
        same.append(template)
        return True

    def save(self, directory) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        paths = []
        for k, t in enumerate(self):
            p = os.path.join(directory, f"template_{k:04d}.bin")
            save_template(t, p)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory) -> "TemplateLibrary":
        lib = cls()
        for name in sorted(os.listdir(directory)):
            if name.startswith("template_") and name.endswith(".bin"):
                t = load_template(os.path.join(directory, name))
                lib.by_label.setdefault(t.semantic_label, []).append(t)
        return lib


def save_template(t: Template, path) -> None:
    """One template per file: text header, then little-endian records."""
    rec = np.zeros(t.size, dtype=TEMPLATE_DTYPE)
    rec["x"], rec["y"], rec["z"] = t.positions.T
    rec["weight"] = t.weights
    if any(c.isspace() for c in t.semantic_label):
        raise ValueError("semantic label may not contain whitespace")
    anchor = " ".join(repr(float(x)) for x in t.anchor)
    header = (f"{TEMPLATE_MAGIC}\nversion {TEMPLATE_VERSION}\n"
              f"semantic_label {t.semantic_label}\nL_T {t.size}\n"
              f"anchor {anchor}\n"
              f"source_id {t.source_id}\ncreated_step {t.created_step}\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def load_template(path) -> Template:
    with open(path, "rb") as fh:
        if fh.readline().decode("ascii").strip() != TEMPLATE_MAGIC:
            raise ValueError(f"{path}: not a template file")
        meta = {}
        while True:
            line = fh.readline().decode("ascii")
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.strip()
            if line == "end_header":
                break
            key, _, val = line.partition(" ")
            meta[key] = val
        if int(meta.get("version", -1)) != TEMPLATE_VERSION:
            raise ValueError(f"{path}: unsupported template version {meta.get('version')}")
        n = int(meta["L_T"])
        rec = np.frombuffer(fh.read(n * TEMPLATE_DTYPE.itemsize), dtype=TEMPLATE_DTYPE)
    if len(rec) != n:
        raise ValueError(f"{path}: expected {n} records, found {len(rec)}")
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    anchor = np.array([float(x) for x in meta["anchor"].split()])
    return Template(meta["semantic_label"], pos, rec["weight"].copy(),
                    int(meta["source_id"]), int(meta["created_step"]), anchor)


# -- completeness -------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def completeness(voxels, n_rays: int = 1000) -> float:
    """Fraction of rays from the voxel mass center that hit an instance voxel.

    ``voxels`` are integer voxel indices. Rays walk the voxel grid from the
    mass center and count as a hit when they enter an instance voxel other
    than the ones touching the center before leaving the instance's
    bounding box.
    """
    v = np.unique(np.asarray(voxels, dtype=np.int64).reshape(-1, 3), axis=0)
    if len(v) == 0:
        raise ValueError("instance has no voxels")
    lo = v.min(axis=0)
    shape = v.max(axis=0) - lo + 1
    occ = np.zeros(shape, dtype=bool)
    occ[tuple((v - lo).T)] = True
    center = (v + 0.5).mean(axis=0) - lo
    dirs = fibonacci_sphere(n_rays)
    return float(_ray_hits(occ, center, dirs).mean())


def _ray_hits(occ: np.ndarray, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Vectorized unit-voxel traversal; True where a ray meets ``occ``."""
    n = len(dirs)
    shape = np.array(occ.shape)
    start = np.floor(origin).astype(np.int64)
    vox = np.tile(start, (n, 1))
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0, 1.0 / np.abs(dirs), np.inf)
    nxt = np.where(dirs > 0, start + 1 - origin, origin - start)
    t_max = np.where(dirs != 0, nxt * inv, np.inf)
    t_delta = inv
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)
    for _ in range(int(shape.sum()) + 3):
        if not active.any():
            break
        a = np.argmin(t_max, axis=1)
        r = rows[active]
        aa = a[active]
        entry = t_max[r, aa].copy()
        vox[r, aa] += step[r, aa]
        t_max[r, aa] += t_delta[r, aa]
        inside = np.all((vox[r] >= 0) & (vox[r] < shape), axis=1)
        active[r[~inside]] = False
        r, entry = r[inside], entry[inside]
        # voxels touching the origin count as the start, not as a hit
        h = occ[tuple(vox[r].T)] & (entry > 1e-9)
        hit[r[h]] = True
        active[r[h]] = False
    return hit


def instance_voxels(label_map, instance_id: int) -> np.ndarray:
    sel = label_map.occupied & (label_map.instance_id == int(instance_id))
    return label_map.voxels[sel]


def maybe_store_template(grid: ParticleGrid, registry: InstanceRegistry, library: TemplateLibrary,
                         instance_id: int, label_map, threshold: float = 0.9,
                         n_rays: int = 1000, step: int = 0,
                         prune_ratio: float = 0.95) -> tuple[bool, float]:
    """Store the instance as a template when its voxels are complete enough.

    Returns ``(stored, completeness)``. Only particles lying in the
    instance's occupied voxels are kept.
    """
    if instance_id not in registry:
        raise KeyError(f"unknown instance {instance_id}")
    vox = instance_voxels(label_map, instance_id)
    if len(vox) == 0:
        return False, 0.0
    c = completeness(vox, n_rays)
    if c <= threshold:
        return False, c
    idx = registry.particle_indices(grid, instance_id)
    g = grid.voxel_index(grid.pos[idx])
    keyset = {tuple(x) for x in vox.tolist()}
    keep = np.array([tuple(x) in keyset for x in g.tolist()], dtype=bool)
    idx = idx[keep]
    if len(idx) == 0:
        return False, c
    anchor = grid.voxel_center(vox).mean(axis=0)
    rec = registry[instance_id]
    t = Template(rec.semantic_label, grid.pos[idx] - anchor, grid.weight[idx].copy(),
                 int(instance_id), int(step), anchor)
    stored = library.add(t, grid.l_voxel, prune_ratio)
    rec.templated = True
    log.info("instance %d completeness %.3f: template %s", instance_id, c,
             "stored" if stored else "pruned")
    return stored, c


# -- similarity -----------------------------------------------------------------

@dataclass
class Evidence:
    """Expected-point indicator h over the voxels of a bounding box.

    ``h`` is +1 for voxels holding a measurement point, -1 for voxels
    observed to be free and 0 otherwise. Voxel ``lo + (i, j, k)`` spans
    ``origin + l_voxel * [lo + (i, j, k), lo + (i, j, k) + 1)``.
    """

    lo: np.ndarray
    h: np.ndarray
    l_voxel: float
    origin: np.ndarray

    @property
    def n_voxels(self) -> int:
        return int(self.h.size)

    def shifted(self, dv) -> "Evidence":
        return Evidence(self.lo + np.asarray(dv, dtype=np.int64), self.h, self.l_voxel, self.origin)


def build_evidence(points, l_voxel: float, origin=(0.0, 0.0, 0.0), free_test=None) -> Evidence:
    """Evidence over the box spanned by ``points``.

    ``free_test`` maps voxel centers (N, 3) to a boolean mask of voxels seen
    free; without it, voxels lacking points are unknown.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("evidence needs at least one point")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    g = np.floor((p - origin) / l_voxel).astype(np.int64)
    lo = g.min(axis=0)
    shape = g.max(axis=0) - lo + 1
    h = np.zeros(shape, dtype=np.int8)
    if free_test is not None:
        idx = np.indices(shape).reshape(3, -1).T
        centers = origin + (idx + lo + 0.5) * l_voxel
        h.reshape(-1)[np.asarray(free_test(centers), dtype=bool)] = -1
    h[tuple((g - lo).T)] = 1
    return Evidence(lo, h, float(l_voxel), origin)


def frame_free_test(frame: MeasurementFrame, l_voxel: float):
    """Voxel-center test: True where the frame saw through the whole voxel.

    A voxel is free when its center projects onto a valid pixel whose depth
    exceeds the center's depth by more than half a voxel diagonal, which is
    what casting that pixel's ray would conclude.
    """
    cam = frame.camera
    margin = 0.5 * math.sqrt(3.0) * l_voxel
    depth = frame.effective_depth()

    def free(centers):
        pc = frame.pose.to_camera(centers)
        u, v, ok = cam.project_points(pc)
        out = np.zeros(len(centers), dtype=bool)
        if ok.any():
            iu = np.floor(u[ok]).astype(np.int64)
            iv = np.floor(v[ok]).astype(np.int64)
            out[ok] = pc[ok, 2] + margin < depth[iv, iu]
        return out

    return free


def evidence_from_frame(frame: MeasurementFrame, instance_id: int, l_voxel: float,
                        origin=(0.0, 0.0, 0.0)) -> Evidence:
    """Evidence for one instance; free voxels lie wholly in front of the measured depth."""
    return build_evidence(frame.instance_points(instance_id), l_voxel, origin,
                          frame_free_test(frame, l_voxel))


def free_mass(template: Template, T: RigidTransform, free_test, l_voxel: float,
              origin=(0.0, 0.0, 0.0)) -> float:
    """Share of a placed template's weight lying in voxels observed free."""
    w = template.weights
    total = float(w.sum())
    if template.size == 0 or total <= 0:
        return 0.0
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    g = np.floor((template.placed(T) - origin) / l_voxel).astype(np.int64)
    vox, inv = np.unique(g, axis=0, return_inverse=True)
    free = np.asarray(free_test(origin + (vox + 0.5) * l_voxel), dtype=bool)
    return float(w[free[inv.reshape(-1)]].sum()) / total


def template_evidence(t: Template, l_voxel: float) -> Evidence:
    """Evidence of a complete template: its own voxels +1, the rest of its box free."""
    p = t.positions + t.anchor
    return build_evidence(p[t.weights > 0] if np.any(t.weights > 0) else p, l_voxel,
                          free_test=lambda c: np.ones(len(c), dtype=bool))


def similarity(evidence: Evidence, template: Template, T: RigidTransform) -> float:
    """Mean over evidence voxels of min(template mass, 1) times h."""
    if evidence.n_voxels == 0:
        raise ValueError("empty evidence")
    if template.size == 0:
        return 0.0
    p = template.placed(T)
    g = np.floor((p - evidence.origin) / evidence.l_voxel).astype(np.int64) - evidence.lo
    shape = np.array(evidence.h.shape)
    ok = np.all((g >= 0) & (g < shape), axis=1)
    if not ok.any():
        return 0.0
    flat = np.ravel_multi_index(tuple(g[ok].T), evidence.h.shape)
    mass = np.bincount(flat, weights=template.weights[ok], minlength=evidence.n_voxels)
    return float(np.dot(np.minimum(mass, 1.0), evidence.h.reshape(-1))) / evidence.n_voxels


# -- RANSAC matching --------------------------------------------------------------

def kabsch(src: np.ndarray, dst: np.ndarray, upright: bool = False) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    With ``upright`` the rotation is restricted to turns about the z axis.
    """
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    if upright:
        yaw = math.atan2(H[0, 1] - H[1, 0], H[0, 0] + H[1, 1])
        c, s_ = math.cos(yaw), math.sin(yaw)
        R = np.array([[c, -s_, 0.0], [s_, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(R, cd - R @ cs)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def voxel_downsample(points: np.ndarray, l: float, weights=None) -> np.ndarray:
    """Mean point per occupied voxel (weighted when ``weights`` is given)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return p
    g = np.floor(p / l).astype(np.int64)
    _, inv = np.unique(g, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64)
    ws = np.bincount(inv, weights=w)
    ws = np.where(ws > 0, ws, 1.0)
    return np.stack([np.bincount(inv, weights=w * p[:, a]) / ws for a in range(3)], axis=1)


@dataclass
class MatchParams:
    iterations: int = 200
    early_exit: float = 0.9
    score_threshold: float = 0.6
    refine_steps: int = 5
    shortlist: int = 8
    max_free_mass: float = 0.1
    upright: bool = True
    max_template_points: int = 1500
    max_rounds: int = 3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


def _refine(src_tree, src_pts, meas, T: RigidTransform, steps: int, radius: float,
            upright: bool = False) -> RigidTransform:
    """Point-to-point alignment from measurements back onto template points."""
    for _ in range(steps):
        local = T.inverse().apply(meas)
        d, j = src_tree.query(local, distance_upper_bound=radius)
        ok = np.isfinite(d)
        if ok.sum() < 3:
            break
        T_new = kabsch(src_pts[j[ok]], meas[ok], upright)
        step = T_new.inverse() @ T
        T = T_new
        if np.linalg.norm(step.translation) < 1e-5 and step.rotation_angle() < 1e-5:
            break
    return T


def match_template(evidence: Evidence, points: np.ndarray, template: Template,
                   rng: np.random.Generator, params: MatchParams | None = None,
                   free_test=None) -> MatchResult:
    """Best placement of one template found by RANSAC over point triplets.

    Triplets of downsampled measurement points are paired with template
    triplets of matching side lengths; each pairing yields a rigid
    hypothesis, hypotheses are ranked by inlier count, and the best few are
    refined and scored with :func:`similarity`. With ``free_test``,
    placements putting more than ``max_free_mass`` of the template's weight
    into observed free space are dropped, both before ranking and after
    refinement. When a whole round of ``iterations`` samples leaves no
    placement standing, sampling continues for up to ``max_rounds`` rounds.
    """
    params = params or MatchParams()
    l = evidence.l_voxel
    meas = voxel_downsample(points, l)
    src = voxel_downsample(template.positions, l, template.weights)
    if len(meas) < 3 or len(src) < 3:
        return MatchResult(template, RigidTransform.identity(), -1.0)
    tree = cKDTree(src)
    tol = 0.75 * l
    hyps: list[tuple[int, RigidTransform]] = []
    mtree = cKDTree(meas)

    def inliers(T):
        d, _ = cKDTree(T.apply(src)).query(meas, distance_upper_bound=tol)
        return int(np.isfinite(d).sum())

    # coarse guess: centroids aligned, orientation kept
    c0 = RigidTransform.from_translation(meas.mean(axis=0) - src.mean(axis=0))
    hyps.append((inliers(c0), c0))
    spread = max(float(np.max(np.ptp(meas, axis=0))), 2 * l)
    if len(src) > params.max_template_points:
        src = src[rng.choice(len(src), params.max_template_points, replace=False)]
        tree = cKDTree(src)
    # pairwise template geometry, so consistent correspondences are looked up, not guessed
    D = np.linalg.norm(src[:, None, :] - src[None, :, :], axis=2)
    DZ = src[None, :, 2] - src[:, None, 2]

    def consistent(i, d, dz):
        ok = np.abs(D[i] - d) <= tol if i is not None else np.abs(D - d) <= tol
        if params.upright:
            ok &= (np.abs(DZ[i] - dz) if i is not None else np.abs(DZ - dz)) <= tol
        return ok

    def sample(n):
        out = []
        for _ in range(n):
            i0 = rng.integers(len(meas))
            near = mtree.query_ball_point(meas[i0], spread)
            if len(near) < 3:
                continue
            i1, i2 = rng.choice(near, size=2, replace=False)
            a, b, c = meas[i0], meas[i1], meas[i2]
            d01, d02, d12 = np.linalg.norm(a - b), np.linalg.norm(a - c), np.linalg.norm(b - c)
            if min(d01, d02, d12) < l or np.linalg.norm(np.cross(b - a, c - a)) < l * l:
                continue
            pairs = np.argwhere(consistent(None, d01, b[2] - a[2]))
            if len(pairs) == 0:
                continue
            j0, j1 = pairs[rng.integers(len(pairs))]
            c2 = np.flatnonzero(consistent(j0, d02, c[2] - a[2]) & (np.abs(D[j1] - d12) <= tol))
            if len(c2) == 0:
                continue
            j2 = c2[rng.integers(len(c2))]
            T = kabsch(src[[j0, j1, j2]], np.stack([a, b, c]), params.upright)
            out.append((inliers(T), T))
        if free_test is not None:
            out = [h for h in out
                   if free_mass(template, h[1], free_test, l, evidence.origin) <= params.max_free_mass]
        return out

    if free_test is not None and free_mass(template, c0, free_test, l, evidence.origin) > params.max_free_mass:
        hyps = []
    # another round only when every placement so far lands in free space
    for _ in range(params.max_rounds):
        hyps += sample(params.iterations)
        if hyps:
            break
    hyps.sort(key=lambda x: -x[0])
    # refinement runs on raw points: voxel means of a partial view are biased
    raw_src = template.positions
    if len(raw_src) > params.max_template_points:
        raw_src = raw_src[rng.choice(len(raw_src), params.max_template_points, replace=False)]
    raw_meas = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(raw_meas) > params.max_template_points:
        raw_meas = raw_meas[rng.choice(len(raw_meas), params.max_template_points, replace=False)]
    raw_tree = cKDTree(raw_src)
    best = MatchResult(template, RigidTransform.identity(), -math.inf)
    for _, T in hyps[:params.shortlist]:
        T = _refine(tree, src, meas, T, params.refine_steps, 2 * l, params.upright)
        T = _refine(raw_tree, raw_src, raw_meas, T, 10 * params.refine_steps, l, params.upright)
        if free_test is not None and free_mass(template, T, free_test, l, evidence.origin) > params.max_free_mass:
            continue
        s = similarity(evidence, template, T)
        if s > best.score:
            best = MatchResult(template, T, s)
        if s >= params.early_exit:
            break
    return best


def match(evidence: Evidence, points, library: TemplateLibrary, semantic_label: str,
          rng: np.random.Generator, params: MatchParams | None = None,
          free_test=None) -> MatchResult | None:
    """Best same-label template placement, or None below the score threshold."""
    params = params or MatchParams()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no measurement points to match")
    best = None
    for t in library.templates(semantic_label):
        r = match_template(evidence, pts, t, rng, params, free_test)
        if best is None or r.score > best.score:
            best = r
        if best.score >= params.early_exit:
            break
    if best is None or best.score < params.score_threshold:
        return None
    return best
