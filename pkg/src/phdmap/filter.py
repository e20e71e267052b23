"""Instance-augmented SMC-PHD filter: predict, update, birth, resampling and
per-voxel occupancy / instance estimation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _kernels
from .geometry import RigidTransform
from .measurement import MeasurementFrame
from .particle_store import InsertReport, InstanceRegistry, ParticleGrid
from .visibility import UpdateIndicesImage, activation_boxes, activation_radius

FREE, OCCUPIED, SPECULATIVE = 0, 1, 2
STATUS_NAMES = {FREE: "free", OCCUPIED: "occupied", SPECULATIVE: "speculative"}
STATUS_CODES = {v: k for k, v in STATUS_NAMES.items()}


@dataclass(frozen=True)
class FilterParams:
    """Filter constants and their default values.

    ``q`` is the per-axis prediction noise variance (m^2). The measurement
    noise standard deviation grows linearly with depth:
    ``sigma(d) = sigma_slope * d + sigma_offset``.
    """

    p_d: float = 0.98
    p_s: float = 1.0
    clutter: float = 0.01
    q: float = 0.01
    sigma_slope: float = 1e-3
    sigma_offset: float = 1e-2
    p_tr: float = 0.5
    forget_speed: float = 1.0
    forget_horizon: int = 5
    use_forgetting: bool = True
    birth_per_measurement: int = 5
    birth_weight: float = 0.001
    occ_threshold: float = 0.8
    capacity: int = 8
    bbox_pixels: int = 5
    activation_eps: float = 1e-6
    match_floor: float = 1e-6
    update_mode: str = "cf"

    def __post_init__(self):
        mode = str(self.update_mode).lower()
        object.__setattr__(self, "update_mode", mode)
        checks = [
            (0 < self.p_d <= 1, "p_d must be in (0, 1]"),
            (0 < self.p_s <= 1, "p_s must be in (0, 1]"),
            (self.clutter >= 0, "clutter must be >= 0"),
            (self.q >= 0, "q must be >= 0"),
            (self.sigma_slope >= 0 and self.sigma_offset > 0, "sigma(d) must be positive"),
            (0 <= self.p_tr < 1, "p_tr must be in [0, 1)"),
            (self.forget_speed > 0, "forget_speed must be > 0"),
            (self.forget_horizon >= 0, "forget_horizon must be >= 0"),
            (self.birth_per_measurement >= 0, "birth_per_measurement must be >= 0"),
            (self.birth_weight >= 0, "birth_weight must be >= 0"),
            (self.occ_threshold > 0, "occ_threshold must be > 0"),
            (self.capacity >= 1, "capacity must be >= 1"),
            (self.bbox_pixels >= 0, "bbox_pixels must be >= 0"),
            (0 < self.activation_eps, "activation_eps must be > 0"),
            (0 <= self.match_floor < 1, "match_floor must be in [0, 1)"),
            (mode in ("if", "cf"), "update_mode must be 'if' or 'cf'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def sigma(self, depth):
        return self.sigma_slope * np.asarray(depth, dtype=np.float64) + self.sigma_offset

    def with_(self, **kw) -> "FilterParams":
        return replace(self, **kw)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def id_transition(z_id, p_id, p_tr: float):
    """1 for equal ids, ``p_tr`` otherwise."""
    return np.where(np.asarray(z_id) == np.asarray(p_id), 1.0, p_tr)


def forgetting(dk, speed: float = 1.0, horizon: int = 5):
    """Truncated exponential forgetting curve of the steps since a same-id match."""
    dk = np.asarray(dk, dtype=np.float64)
    if np.any(dk < 0):
        raise ValueError("dk must be nonnegative")
    out = np.where(dk <= horizon, np.exp(-dk / speed), 0.0)
    return float(out) if out.ndim == 0 else out


def gaussian_density(z, x, sigma):
    """Isotropic 3D normal density N(z; x, sigma^2 I)."""
    d2 = np.sum((np.asarray(z, dtype=np.float64) - np.asarray(x, dtype=np.float64)) ** 2, axis=-1)
    s = np.asarray(sigma, dtype=np.float64)
    return (2.0 * math.pi * s * s) ** -1.5 * np.exp(-0.5 * d2 / (s * s))


# -- prediction ----------------------------------------------------------------

@dataclass
class PredictReport:
    moved: int = 0
    discarded: int = 0
    extrapolated: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def extrapolate(registry: InstanceRegistry, instance_id: int) -> RigidTransform | None:
    """Constant-velocity guess of an unobserved instance's next motion.

    The history holds per-step relative motions, so keeping the velocity
    constant means repeating the most recent one.
    """
    hist = registry[instance_id].history
    if not hist:
        return None
    return hist[-1][1]


def predict(grid: ParticleGrid, registry: InstanceRegistry,
            transforms: dict[int, RigidTransform], params: FilterParams, step: int,
            rng: np.random.Generator) -> PredictReport:
    """Move instance-of-interest particles by their estimated motion plus noise."""
    report = PredictReport()
    if params.p_s != 1.0:
        live = grid.live()
        grid.weight[live] *= params.p_s
    for iid in sorted(transforms):
        if iid in registry and not registry[iid].movable:
            msg = f"ignoring transform for background instance {iid}"
            report.warnings.append(msg)
    all_idx, all_pos = [], []
    std = math.sqrt(params.q)
    for iid in sorted(registry.records):
        rec = registry[iid]
        if not rec.movable:
            continue
        idx = registry.particle_indices(grid, iid)
        T = transforms.get(iid)
        if T is None:
            if len(idx) == 0:
                continue
            T = extrapolate(registry, iid)
            if T is None:
                T = RigidTransform.identity()
                msg = f"instance {iid} occluded without motion history; holding still"
                report.warnings.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
            else:
                report.extrapolated.append(iid)
        registry.append_transform(iid, step, T)
        if len(idx) == 0:
            continue
        newp = T.apply(grid.pos[idx])
        if std > 0:
            newp = newp + rng.normal(0.0, std, size=newp.shape)
        all_idx.append(idx)
        all_pos.append(newp)
    if all_idx:
        rep = grid.move(np.concatenate(all_idx), np.concatenate(all_pos), rng, step)
        report.moved = rep.accepted
        report.discarded = rep.discarded_full + rep.discarded_out_of_range
    return report


# -- update ---------------------------------------------------------------------

@dataclass
class UpdateReport:
    visible: int = 0
    measurements: int = 0
    matched: int = 0
    fallback_boxes: int = 0


@dataclass
class MeasurementSet:
    """Flat arrays describing one frame's measurement points for the update."""

    points: np.ndarray
    ids: np.ndarray
    sigma: np.ndarray
    boxes: np.ndarray
    fallback: np.ndarray


def measurement_set(frame: MeasurementFrame, params: FilterParams) -> MeasurementSet:
    depth = frame.point_depths
    sig = params.sigma(depth)
    radius = activation_radius(depth, params.sigma, params.activation_eps)
    boxes, fb = activation_boxes(frame.camera, frame.points_camera, radius, params.bbox_pixels)
    return MeasurementSet(np.ascontiguousarray(frame.points), frame.point_ids.astype(np.int64),
                          sig, boxes, fb)


def weight_gain(meas: MeasurementSet, image: UpdateIndicesImage, width: int,
                vpos, vid, vw, vlast, params: FilterParams, step: int):
    """Run both update passes; returns ``(gain, matched, mass)``."""
    collective = params.update_mode == "cf"
    args = (params.p_d,)
    mass = _kernels.measurement_mass(
        meas.points, meas.ids, meas.sigma, meas.boxes, image.start, width,
        vpos, vid, vw, vlast, step, *args, collective, params.p_tr,
        params.use_forgetting, params.forget_speed, params.forget_horizon)
    gain, matched = _kernels.accumulate_gain(
        meas.points, meas.ids, meas.sigma, meas.boxes, image.start, width,
        vpos, vid, vlast, mass, step, params.p_d, params.clutter, collective, params.p_tr,
        params.use_forgetting, params.forget_speed, params.forget_horizon, params.match_floor)
    return gain, matched, mass


def update(grid: ParticleGrid, image: UpdateIndicesImage, frame: MeasurementFrame,
           params: FilterParams, step: int) -> UpdateReport:
    """Posterior weights for visible particles.

    ``w <- [1 - P_d + sum_z P_d g(z|x) / (kappa + C(z))] w`` where the sum
    runs over measurements whose activation box covers the particle's pixel.
    Particles not in ``image`` keep their weights.
    """
    vis = image.particles
    meas = measurement_set(frame, params)
    report = UpdateReport(visible=len(vis), measurements=len(meas.ids),
                          fallback_boxes=int(meas.fallback.sum()))
    if len(vis) == 0:
        return report
    vpos = np.ascontiguousarray(grid.pos[vis])
    vid = grid.inst[vis]
    vw = grid.weight[vis]
    vlast = grid.last_match[vis]
    if len(meas.ids):
        gain, matched, _ = weight_gain(meas, image, frame.camera.width, vpos, vid, vw, vlast,
                                       params, step)
    else:
        gain = np.zeros(len(vis))
        matched = np.zeros(len(vis), dtype=bool)
    grid.weight[vis] = (1.0 - params.p_d + gain) * vw
    grid.last_match[vis[matched]] = step
    grid.pending[vis] = False
    grid.version += 1
    report.matched = int(matched.sum())
    return report


# -- birth ---------------------------------------------------------------------------

@dataclass
class TemplateBirth:
    instance_id: int
    positions: np.ndarray


@dataclass
class BirthReport:
    newborns: int = 0
    template_born: int = 0
    insert: InsertReport = field(default_factory=InsertReport)


def birth_weights(ids: np.ndarray, params: FilterParams,
                  template_sizes: dict[int, int]) -> np.ndarray:
    """Per-measurement newborn weight, diluted for template-matched instances.

    Without a template the weight is ``w_b``. For an instance with ``M``
    measurement points and a matched template of ``L_T`` particles the
    instance's birth mass ``w_b * M * L_b`` is spread over
    ``M * L_b + L_T`` particles.
    """
    w = np.full(len(ids), params.birth_weight)
    lb = params.birth_per_measurement
    for iid, lt in template_sizes.items():
        sel = ids == iid
        m = int(sel.sum())
        w[sel] = diluted_weight(params.birth_weight, m, lb, lt)
    return w


def diluted_weight(w_b: float, m: int, l_b: int, l_t: int) -> float:
    v_b = w_b * m * l_b
    den = m * l_b + l_t
    return v_b / den if den else 0.0


def birth(grid: ParticleGrid, registry: InstanceRegistry, frame: MeasurementFrame,
          params: FilterParams, step: int, rng: np.random.Generator,
          template_births: list[TemplateBirth] = ()) -> BirthReport:
    """Spawn ``L_b`` jittered particles per measurement point, plus template particles."""
    report = BirthReport()
    ids = frame.point_ids
    for iid in np.unique(ids).tolist():
        lab = frame.label_of(iid)
        registry.ensure(iid, lab.semantic_label, movable=not lab.background, step=step)
    lb = params.birth_per_measurement
    sizes = {tb.instance_id: len(tb.positions) for tb in template_births}
    per_meas_w = birth_weights(ids, params, sizes)
    if lb > 0 and len(ids):
        # Newborns arrive in random order, so a full cell keeps newborns spread
        # over its measurements instead of the first few pixels in scan order.
        src = rng.permutation(len(ids) * lb) // lb
        sig = params.sigma(frame.point_depths)[src]
        pos = frame.points[src] + rng.normal(size=(len(src), 3)) * sig[:, None]
        nid = ids[src]
        nw = per_meas_w[src]
    else:
        pos = np.zeros((0, 3))
        nid = np.zeros(0, dtype=np.int64)
        nw = np.zeros(0)
    pending = np.zeros(len(nid), dtype=bool)
    report.newborns = len(nid)
    if template_births:
        tpos = [pos]
        tid = [nid]
        tw = [nw]
        tp = [pending]
        for tb in template_births:
            m = int((ids == tb.instance_id).sum())
            w = diluted_weight(params.birth_weight, m, lb, len(tb.positions))
            tb_pos = np.asarray(tb.positions, dtype=np.float64).reshape(-1, 3)
            tpos.append(tb_pos[rng.permutation(len(tb_pos))])
            tid.append(np.full(len(tb_pos), tb.instance_id, dtype=np.int64))
            tw.append(np.full(len(tb_pos), w))
            tp.append(np.ones(len(tb_pos), dtype=bool))
            report.template_born += len(tb_pos)
        pos, nid, nw, pending = (np.concatenate(a) for a in (tpos, tid, tw, tp))
    report.insert = grid.insert(pos, nid, nw, step, rng, step=step, pending=pending)
    return report


# -- estimation --------------------------------------------------------------------

@dataclass
class LabeledVoxelMap:
    """Occupancy, instance and semantic decision per voxel holding particles.

    Voxels are global integer indices; voxels not listed are free.
    """

    voxels: np.ndarray
    status: np.ndarray
    instance_id: np.ndarray
    semantic: np.ndarray
    total_weight: np.ndarray
    l_voxel: float
    origin: np.ndarray
    lo: np.ndarray
    n: int
    step: int = 0

    def __len__(self) -> int:
        return len(self.voxels)

    @property
    def occupied(self) -> np.ndarray:
        return self.status == OCCUPIED

    @property
    def speculative(self) -> np.ndarray:
        return self.status == SPECULATIVE

    def centers(self, mask=None) -> np.ndarray:
        v = self.voxels if mask is None else self.voxels[mask]
        return self.origin + (v + 0.5) * self.l_voxel

    def status_at(self, voxels) -> np.ndarray:
        g = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        out = np.zeros(len(g), dtype=np.uint8)
        if len(self.voxels) == 0 or len(g) == 0:
            return out
        table = {tuple(v): i for i, v in enumerate(self.voxels.tolist())}
        for k, v in enumerate(g.tolist()):
            i = table.get(tuple(v))
            if i is not None:
                out[k] = self.status[i]
        return out

    def instance_at(self, voxels) -> np.ndarray:
        g = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        out = np.zeros(len(g), dtype=np.int64)
        table = {tuple(v): i for i, v in enumerate(self.voxels.tolist())}
        for k, v in enumerate(g.tolist()):
            i = table.get(tuple(v))
            if i is not None and self.status[i] == OCCUPIED:
                out[k] = self.instance_id[i]
        return out

    def to_text(self, path, include_speculative: bool = True) -> int:
        keep = self.occupied | (self.speculative if include_speculative else False)
        c = self.centers(keep)
        lines = [
            "# phdmap labeled voxel map",
            f"# step {self.step}",
            f"# l_voxel {float(self.l_voxel)!r}",
            "# origin " + " ".join(repr(float(x)) for x in self.origin),
            "# lo " + " ".join(str(int(x)) for x in self.lo) + f" n {self.n}",
            "# x y z status instance_id semantic_label",
        ]
        st = self.status[keep]
        ids = self.instance_id[keep]
        sem = self.semantic[keep]
        for k in range(len(c)):
            lines.append(f"{c[k, 0]:.4f} {c[k, 1]:.4f} {c[k, 2]:.4f} {STATUS_NAMES[int(st[k])]} "
                         f"{int(ids[k])} {sem[k] or '-'}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return len(c)

    @classmethod
    def from_text(cls, path) -> "LabeledVoxelMap":
        meta = {"step": 0, "l_voxel": None, "origin": np.zeros(3), "lo": np.zeros(3, int), "n": 0}
        rows = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if not parts:
                        continue
                    if parts[0] == "step":
                        meta["step"] = int(parts[1])
                    elif parts[0] == "l_voxel":
                        meta["l_voxel"] = float(parts[1])
                    elif parts[0] == "origin":
                        meta["origin"] = np.array([float(x) for x in parts[1:4]])
                    elif parts[0] == "lo":
                        meta["lo"] = np.array([int(x) for x in parts[1:4]])
                        meta["n"] = int(parts[5])
                    continue
                rows.append(line.split())
        if meta["l_voxel"] is None:
            raise ValueError(f"{path}: missing l_voxel header")
        l = meta["l_voxel"]
        if rows:
            xyz = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows])
            vox = np.floor((xyz - meta["origin"]) / l).astype(np.int64)
            status = np.array([STATUS_CODES[r[3]] for r in rows], dtype=np.uint8)
            ids = np.array([int(r[4]) for r in rows], dtype=np.int64)
            sem = np.array(["" if r[5] == "-" else r[5] for r in rows], dtype=object)
        else:
            vox = np.zeros((0, 3), np.int64)
            status = np.zeros(0, np.uint8)
            ids = np.zeros(0, np.int64)
            sem = np.zeros(0, dtype=object)
        return cls(vox, status, ids, sem, np.full(len(vox), np.nan), l, meta["origin"],
                   meta["lo"], meta["n"], meta["step"])


def cell_id_sums(grid: ParticleGrid):
    """Per (cell, id) weight sums over live particles, ids ascending per cell.

    Returns ``(cells, cell_start, pair_ids, pair_sums)``.
    """
    live = grid.live()
    if len(live) == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z, np.zeros(0)
    order = np.lexsort((live, grid.inst[live], grid.code[live]))
    idx = live[order]
    code = grid.code[idx]
    inst = grid.inst[idx]
    brk = np.ones(len(idx), dtype=bool)
    brk[1:] = (code[1:] != code[:-1]) | (inst[1:] != inst[:-1])
    pstart = np.flatnonzero(brk)
    psum = np.add.reduceat(grid.weight[idx], pstart)
    pcode = code[pstart]
    pid = inst[pstart]
    cbrk = np.ones(len(pstart), dtype=bool)
    cbrk[1:] = pcode[1:] != pcode[:-1]
    cstart = np.flatnonzero(cbrk)
    return pcode[cstart], cstart, pid, psum


def estimate_map(grid: ParticleGrid, registry: InstanceRegistry | None,
                 params: FilterParams, step: int | None = None) -> LabeledVoxelMap:
    """Occupancy first (total weight >= threshold), then the heaviest id."""
    cells, cstart, pid, psum = cell_id_sums(grid)
    n_cells = len(cells)
    if n_cells:
        totals = np.add.reduceat(psum, cstart)
        pcell = np.repeat(np.arange(n_cells), np.diff(np.append(cstart, len(psum))))
        best = np.maximum.reduceat(psum, cstart)
        is_best = psum == best[pcell]
        first_best = np.full(n_cells, -1, dtype=np.int64)
        cand = np.flatnonzero(is_best)
        # ids ascend within a cell, so the first maximal pair has the smallest id
        first_best[pcell[cand[::-1]]] = cand[::-1]
        winner = pid[first_best]
    else:
        totals = np.zeros(0)
        winner = np.zeros(0, dtype=np.int64)
    occ = totals >= params.occ_threshold
    status = np.where(occ, OCCUPIED, FREE).astype(np.uint8)
    if n_cells and (~occ).any():
        live = grid.live()
        pend = live[grid.pending[live]]
        if len(pend):
            spec_cells = np.unique(grid.code[pend])
            status[~occ & np.isin(cells, spec_cells)] = SPECULATIVE
    inst = np.where(status != FREE, winner, 0).astype(np.int64)
    if registry is not None:
        sem = np.array([registry.label_of(i) if i else "" for i in inst.tolist()], dtype=object)
    else:
        sem = np.array(["" for _ in inst.tolist()], dtype=object)
    vox = grid.global_of_code(cells) if n_cells else np.zeros((0, 3), dtype=np.int64)
    order = np.lexsort((vox[:, 2], vox[:, 1], vox[:, 0])) if n_cells else np.zeros(0, np.int64)
    return LabeledVoxelMap(vox[order], status[order], inst[order], sem[order], totals[order],
                           grid.l_voxel, grid.origin.copy(), grid.lo.copy(), grid.n,
                           grid.step if step is None else step)
