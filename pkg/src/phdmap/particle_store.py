"""Egocentric ring buffer of voxel cells holding particles, plus the
instance registry.

Particles live in a flat structure-of-arrays pool. Each live particle
carries the Morton code of its ring-buffer cell; per-cell live counts are a
dense array indexed by that code, so a cell lookup is a single array read.
Global voxel index ``g = floor((p - origin) / l_voxel)``; the window covers
``lo <= g < lo + 2**m`` per axis and the ring slot is ``g mod 2**m``.
"""

from __future__ import annotations

import enum
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import RigidTransform

SNAPSHOT_MAGIC = "PHDMAP-SNAPSHOT"
SNAPSHOT_VERSION = 1

SNAPSHOT_DTYPE = np.dtype([
    ("cell", "<u8"),
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("weight", "<f8"),
    ("instance_id", "<u4"),
    ("last_match_step", "<i8"),
])

UNLABELED_ID = 1


# -- Morton codes -------------------------------------------------------------

def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode_array(idx: np.ndarray, bits: int = 21) -> np.ndarray:
    """Interleave ``(N, 3)`` nonnegative indices; x occupies the lowest bit."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << bits)):
        raise ValueError(f"voxel index out of range for {bits} bits")
    code = (_spread_bits(idx[..., 0]) | (_spread_bits(idx[..., 1]) << np.uint64(1))
            | (_spread_bits(idx[..., 2]) << np.uint64(2)))
    return code.astype(np.int64)


def morton_decode_array(code: np.ndarray) -> np.ndarray:
    c = np.asarray(code).astype(np.uint64)
    out = np.stack([_compact_bits(c), _compact_bits(c >> np.uint64(1)),
                    _compact_bits(c >> np.uint64(2))], axis=-1)
    return out.astype(np.int64)


def morton_encode(ix: int, iy: int, iz: int, bits: int = 21) -> int:
    for i in (ix, iy, iz):
        if not 0 <= int(i) < (1 << bits):
            raise ValueError(f"voxel index {i} out of range for {bits} bits")
    return int(morton_encode_array(np.array([[ix, iy, iz]]), bits)[0])


def morton_decode(code: int) -> tuple[int, int, int]:
    ix, iy, iz = morton_decode_array(np.array([code]))[0]
    return int(ix), int(iy), int(iz)


# -- particles and cells ------------------------------------------------------

@dataclass
class Particle:
    position: np.ndarray
    instance_id: int
    weight: float
    last_match_step: int = 0
    valid: bool = True

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.weight < 0:
            raise ValueError("particle weight must be nonnegative")
        if self.instance_id <= 0:
            raise ValueError("instance id must be positive")


class InsertOutcome(enum.Enum):
    ACCEPTED = "accepted"
    RESAMPLED_THEN_ACCEPTED = "resampled-then-accepted"
    DISCARDED_FULL = "discarded-full"
    DISCARDED_OUT_OF_RANGE = "discarded-out-of-range"


@dataclass
class InsertReport:
    accepted: int = 0
    resampled_cells: int = 0
    discarded_full: int = 0
    discarded_out_of_range: int = 0


@dataclass
class RecenterReport:
    shift: np.ndarray
    cells_cleared: int
    particles_removed: int
    residual: np.ndarray


_FIELDS = ("pos", "weight", "inst", "last_match", "born", "code", "valid", "pending")


class ParticleGrid:
    """Fixed-capacity voxel cells in a scrolling 3D ring buffer.

    ``m`` is the number of bits per axis (``2**m`` voxels per axis) and
    ``capacity`` the per-cell particle limit.
    """

    def __init__(self, m: int = 7, l_voxel: float = 0.2, capacity: int = 8,
                 origin=(0.0, 0.0, 0.0), sensor_position=None, initial_pool: int = 1 << 14):
        if not 1 <= m <= 10:
            raise ValueError("m must be in [1, 10]")
        if not l_voxel > 0:
            raise ValueError("l_voxel must be positive")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.m = int(m)
        self.n = 1 << self.m
        self.l_voxel = float(l_voxel)
        self.capacity = int(capacity)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.count = np.zeros(self.n ** 3, dtype=np.int32)
        self.size = 0
        self.step = 0
        self.version = 0
        self._alloc(max(16, initial_pool))
        s = self.origin if sensor_position is None else np.asarray(sensor_position, float)
        self.anchor = np.asarray(s, dtype=np.float64).reshape(3).copy()
        self.total_shift = np.zeros(3, dtype=np.int64)
        self._lo0 = np.floor((self.anchor - self.origin) / self.l_voxel + 1e-9).astype(np.int64) - self.n // 2
        self.lo = self._lo0.copy()

    # -- pool management ----------------------------------------------------
    def _alloc(self, cap: int):
        self.pos = np.zeros((cap, 3))
        self.weight = np.zeros(cap)
        self.inst = np.zeros(cap, dtype=np.int64)
        self.last_match = np.zeros(cap, dtype=np.int64)
        self.born = np.zeros(cap, dtype=np.int64)
        self.code = np.full(cap, -1, dtype=np.int64)
        self.valid = np.zeros(cap, dtype=bool)
        self.pending = np.zeros(cap, dtype=bool)

    def _reserve(self, extra: int):
        need = self.size + extra
        cap = len(self.weight)
        if need <= cap:
            return
        new_cap = cap
        while new_cap < need:
            new_cap *= 2
        for name in _FIELDS:
            old = getattr(self, name)
            new = np.zeros((new_cap,) + old.shape[1:], dtype=old.dtype)
            if name == "code":
                new[:] = -1
            new[:self.size] = old[:self.size]
            setattr(self, name, new)

    def compact(self) -> np.ndarray:
        """Drop invalid slots. Returns the old index of every kept particle."""
        keep = np.flatnonzero(self.valid[:self.size])
        n = len(keep)
        for name in _FIELDS:
            arr = getattr(self, name)
            arr[:n] = arr[keep]
        self.valid[n:self.size] = False
        self.code[n:self.size] = -1
        self.size = n
        self.version += 1
        return keep

    def live(self) -> np.ndarray:
        return np.flatnonzero(self.valid[:self.size])

    @property
    def n_live(self) -> int:
        return int(self.valid[:self.size].sum())

    # -- indexing -----------------------------------------------------------
    @property
    def extent(self) -> float:
        return self.n * self.l_voxel

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin + self.lo * self.l_voxel
        return lo, lo + self.extent

    def voxel_index(self, positions) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        return np.floor((p - self.origin) / self.l_voxel).astype(np.int64)

    def voxel_center(self, g) -> np.ndarray:
        return self.origin + (np.asarray(g, dtype=np.float64) + 0.5) * self.l_voxel

    def in_window(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g)
        return np.all((g >= self.lo) & (g < self.lo + self.n), axis=-1)

    def slot_of(self, g: np.ndarray) -> np.ndarray:
        return np.mod(g, self.n)

    def code_of_global(self, g: np.ndarray) -> np.ndarray:
        """Morton code of the ring slot for in-window global indices, -1 otherwise."""
        g = np.asarray(g, dtype=np.int64).reshape(-1, 3)
        ok = self.in_window(g)
        out = np.full(len(g), -1, dtype=np.int64)
        if ok.any():
            out[ok] = morton_encode_array(self.slot_of(g[ok]), self.m)
        return out

    def cell_of(self, positions) -> np.ndarray:
        p = np.ascontiguousarray(np.asarray(positions, dtype=np.float64).reshape(-1, 3))
        return _kernels.cell_codes(p, self.origin, self.l_voxel, self.lo.astype(np.int64), self.n)

    def global_of_code(self, code) -> np.ndarray:
        """Invert a Morton code to the global index it currently represents."""
        slot = morton_decode_array(np.asarray(code, dtype=np.int64))
        return self.lo + np.mod(slot - self.lo, self.n)

    # -- recentering ----------------------------------------------------------
    def recenter(self, sensor_position) -> RecenterReport:
        """Scroll the window to follow the sensor by whole voxels.

        Sub-voxel motion accumulates in ``residual`` until it adds up to a
        whole voxel. Surviving particles keep their map-frame position and
        their cell: only the window bounds move.
        """
        s = np.asarray(sensor_position, dtype=np.float64).reshape(3)
        rel = (s - self.anchor) / self.l_voxel
        total = np.floor(rel + 1e-9).astype(np.int64)
        shift = total - self.total_shift
        residual = (s - self.anchor) - total * self.l_voxel
        removed = 0
        cleared = 0
        if np.any(shift != 0):
            self.total_shift = total
            self.lo = self._lo0 + total
            per_axis = np.clip(self.n - np.abs(shift), 0, self.n)
            cleared = int(self.n ** 3 - np.prod(per_axis))
            live = self.live()
            if len(live):
                g = self.voxel_index(self.pos[live])
                out = live[~self.in_window(g)]
                removed = len(out)
                self._kill(out)
            self.version += 1
        return RecenterReport(shift=shift, cells_cleared=cleared,
                              particles_removed=removed, residual=residual)

    def _kill(self, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        idx = idx[self.valid[idx]]
        if len(idx) == 0:
            return
        np.subtract.at(self.count, self.code[idx], 1)
        self.valid[idx] = False
        self.code[idx] = -1
        self.version += 1

    def invalidate(self, idx) -> None:
        self._kill(np.atleast_1d(idx))

    # -- resampling -----------------------------------------------------------
    def resample_cells(self, codes, rng: np.random.Generator, step: int | None = None) -> int:
        """Halve the live particles of each listed cell by weight.

        Particles born at ``step`` are not touched. Survivors are drawn by
        systematic resampling over the cell's particles ordered by instance
        id, so each particle's expected copy count is proportional to its
        weight. Each surviving id's weight mass is spread evenly over its
        copies and rescaled so the cell total is unchanged. Returns the
        number of cells resampled.
        """
        codes = np.unique(np.asarray(codes, dtype=np.int64))
        if len(codes) == 0:
            return 0
        live = self.live()
        sel = live[np.isin(self.code[live], codes)]
        if step is not None:
            sel = sel[self.born[sel] < step]
        if len(sel) == 0:
            return 0
        order = np.lexsort((sel, self.inst[sel], self.code[sel]))
        sel = sel[order]
        c = self.code[sel]
        uniq, start, n = np.unique(c, return_index=True, return_counts=True)
        work = n > 1
        if not work.any():
            return 0
        grp_mask = np.repeat(work, n)
        sel, c = sel[grp_mask], c[grp_mask]
        uniq, start, n = np.unique(c, return_index=True, return_counts=True)
        self._resample_sorted(sel, start, n, self._keep_counts(sel, start, n), rng)
        return int(len(uniq))

    def _keep_counts(self, sel, start, n) -> np.ndarray:
        """Survivor count per group: half, raised so the heaviest ids survive.

        Draws are spaced ``1/target`` apart over id-contiguous intervals, so an
        id whose weight share is at least ``1/target`` always gets a copy. The
        target is raised (never above the group size) until the ids with the
        largest mass clear that bar, which keeps the cell's winning id.
        """
        gid = np.repeat(np.arange(len(n)), n)
        inst, w = self.inst[sel], self.weight[sel]
        brk = np.ones(len(sel), dtype=bool)
        brk[1:] = (gid[1:] != gid[:-1]) | (inst[1:] != inst[:-1])
        pstart = np.flatnonzero(brk)
        pmass = np.add.reduceat(w, pstart)
        gmax = np.zeros(len(n))
        np.maximum.at(gmax, gid[pstart], pmass)
        total = np.bincount(gid, weights=w, minlength=len(n))
        with np.errstate(divide="ignore", invalid="ignore"):
            # slack so an exact share of 1/k asks for k draws, not k + 1
            need = np.ceil(total / gmax - 1e-9)
        need = np.where(gmax > 0, need, 1).astype(np.int64)
        return np.minimum(np.maximum(np.maximum(1, n // 2), need), n)

    def _resample_sorted(self, sel, start, n, target, rng):
        """Systematic resampling of contiguous groups ``sel[start:start+n]``."""
        n_groups = len(n)
        gid = np.repeat(np.arange(n_groups), n)
        w = self.weight[sel]
        W = np.bincount(gid, weights=w, minlength=n_groups)
        flat = W <= 0
        wn = np.where(flat[gid], 1.0, w)
        Wn = np.where(flat, n.astype(np.float64), W)
        cum = np.cumsum(wn)
        base = np.concatenate([[0.0], cum])[start]
        c = (cum - base[gid]) / Wn[gid]
        c[start + n - 1] = 1.0
        key = gid + c
        tgid = np.repeat(np.arange(n_groups), target)
        tstart = np.concatenate([[0], np.cumsum(target)[:-1]])
        j = np.arange(len(tgid)) - tstart[tgid]
        u = (j + rng.random(n_groups)[tgid]) / target[tgid]
        pick = np.searchsorted(key, tgid + u, side="right")
        pick = np.minimum(pick, (start + n - 1)[tgid])
        pick = np.maximum(pick, start[tgid])
        src = sel[pick]
        ids = self.inst[src]
        # weight of each surviving id, spread over its copies
        pair_key = tgid.astype(np.int64) * (1 << 40) + ids
        pk_u, pk_inv, pk_cnt = np.unique(pair_key, return_inverse=True, return_counts=True)
        all_key = gid.astype(np.int64) * (1 << 40) + self.inst[sel]
        ak_u, ak_inv = np.unique(all_key, return_inverse=True)
        id_mass = np.bincount(ak_inv, weights=w)
        surv_mass = id_mass[np.searchsorted(ak_u, pk_u)]
        group_of_pair = (pk_u >> 40).astype(np.int64)
        surv_total = np.bincount(group_of_pair, weights=surv_mass, minlength=n_groups)
        scale = np.where(surv_total > 0, W / np.where(surv_total > 0, surv_total, 1.0), 0.0)
        new_w = surv_mass[pk_inv] / pk_cnt[pk_inv] * scale[tgid]
        if flat.any():
            new_w[flat[tgid]] = 0.0
        snapshot = {name: getattr(self, name)[src].copy() for name in _FIELDS}
        dst = sel[start[tgid] + j]
        for name in _FIELDS:
            getattr(self, name)[dst] = snapshot[name]
        self.weight[dst] = new_w
        drop_mask = np.ones(len(sel), dtype=bool)
        drop_mask[start[tgid] + j] = False
        self._kill(sel[drop_mask])
        self.version += 1

    def resample_cell(self, code: int, rng: np.random.Generator, step: int | None = None) -> None:
        self.resample_cells([code], rng, step)

    # -- insertion --------------------------------------------------------------
    def _admit(self, codes: np.ndarray, rng: np.random.Generator, step: int,
               report: InsertReport) -> np.ndarray:
        """Decide which incoming particles fit, resampling full cells once.

        Incoming particles are handled in arrival order per cell. A cell that
        cannot take its whole batch is resampled once (its resident particles
        not born this step are halved); whatever still does not fit is
        discarded.
        """
        accepted = np.zeros(len(codes), dtype=bool)
        if len(codes) == 0:
            return accepted
        order = _kernels.counting_order(codes, self.n ** 3)
        sc = codes[order]
        uniq, first, k = np.unique(sc, return_index=True, return_counts=True)
        over = self.count[uniq] + k > self.capacity
        if over.any():
            report.resampled_cells += self.resample_cells(uniq[over], rng, step)
        free = np.maximum(self.capacity - self.count[uniq], 0)
        rank = np.arange(len(sc)) - np.repeat(first, k)
        accepted[order] = rank < np.repeat(free, k)
        self.count[uniq] += np.minimum(k, free).astype(np.int32)
        return accepted

    def insert(self, positions, inst, weights, last_match, rng: np.random.Generator,
               step: int | None = None, pending=None) -> InsertReport:
        """Batch insertion of new particles (newborns)."""
        step = self.step if step is None else int(step)
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(p)
        inst = np.broadcast_to(np.asarray(inst, dtype=np.int64), (n,))
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (n,))
        lm = np.broadcast_to(np.asarray(last_match, dtype=np.int64), (n,))
        pend = np.zeros(n, bool) if pending is None else np.broadcast_to(np.asarray(pending, bool), (n,))
        report = InsertReport()
        codes = self.cell_of(p)
        inside = codes >= 0
        report.discarded_out_of_range = int((~inside).sum())
        idx_in = np.flatnonzero(inside)
        ok = self._admit(codes[idx_in], rng, step, report)
        take = idx_in[ok]
        report.accepted = len(take)
        report.discarded_full = int(len(idx_in) - len(take))
        if len(take):
            self._reserve(len(take))
            s = slice(self.size, self.size + len(take))
            self.pos[s] = p[take]
            self.weight[s] = w[take]
            self.inst[s] = inst[take]
            self.last_match[s] = lm[take]
            self.born[s] = step
            self.code[s] = codes[take]
            self.valid[s] = True
            self.pending[s] = pend[take]
            self.size += len(take)
            self.version += 1
        return report

    def insert_particle(self, p: Particle, rng: np.random.Generator,
                        step: int | None = None) -> InsertOutcome:
        rep = self.insert(p.position[None], p.instance_id, p.weight, p.last_match_step,
                          rng, step=step)
        if rep.discarded_out_of_range:
            return InsertOutcome.DISCARDED_OUT_OF_RANGE
        if rep.discarded_full:
            return InsertOutcome.DISCARDED_FULL
        if rep.resampled_cells:
            return InsertOutcome.RESAMPLED_THEN_ACCEPTED
        return InsertOutcome.ACCEPTED

    def move(self, idx, new_positions, rng: np.random.Generator,
             step: int | None = None) -> InsertReport:
        """Move live particles and re-home them under the capacity rule.

        Moved particles leave their old cells first; they are then admitted
        to their new cells in pool order, with the residents of a full cell
        resampled once. Particles leaving the window are discarded.
        """
        step = self.step if step is None else int(step)
        idx = np.asarray(idx, dtype=np.int64)
        idx_ok = self.valid[idx]
        idx = idx[idx_ok]
        newp = np.asarray(new_positions, dtype=np.float64).reshape(-1, 3)[idx_ok]
        report = InsertReport()
        if len(idx) == 0:
            return report
        np.subtract.at(self.count, self.code[idx], 1)
        self.valid[idx] = False
        self.code[idx] = -1
        codes = self.cell_of(newp)
        inside = codes >= 0
        report.discarded_out_of_range = int((~inside).sum())
        keep = np.flatnonzero(inside)
        ok = self._admit(codes[keep], rng, step, report)
        take = keep[ok]
        report.accepted = len(take)
        report.discarded_full = int(len(keep) - len(take))
        tgt = idx[take]
        self.pos[tgt] = newp[take]
        self.code[tgt] = codes[take]
        self.valid[tgt] = True
        self.version += 1
        return report

    # -- queries ---------------------------------------------------------------
    def particles_in_cell(self, code: int) -> np.ndarray:
        live = self.live()
        return live[self.code[live] == code]

    def weight_sum_by_id(self, code: int) -> dict[int, float]:
        idx = self.particles_in_cell(code)
        out: dict[int, float] = {}
        for i in sorted(set(self.inst[idx].tolist())):
            out[int(i)] = float(self.weight[idx[self.inst[idx] == i]].sum())
        return out

    def weight_sum(self, code: int) -> float:
        # summed over per-id totals so the two agree exactly
        return float(sum(self.weight_sum_by_id(code).values()))

    def particles(self) -> list[Particle]:
        return [Particle(self.pos[i], int(self.inst[i]), float(self.weight[i]),
                         int(self.last_match[i])) for i in self.live()]


@dataclass
class InstanceRecord:
    instance_id: int
    semantic_label: str
    movable: bool = True
    history: deque = field(default_factory=lambda: deque(maxlen=8))
    empty_frames: int = 0
    first_seen: int = 0
    templated: bool = False


class InstanceRegistry:
    """Hash map from instance id to per-instance state.

    Particle index lists are derived on demand from the grid and cached per
    grid version, so they never hold stale references.
    """

    def __init__(self, background_ids=(UNLABELED_ID,)):
        self.records: dict[int, InstanceRecord] = {}
        self.background_ids = set(int(i) for i in background_ids)
        self._cache_version = None
        self._cache = None

    def __contains__(self, instance_id) -> bool:
        return int(instance_id) in self.records

    def __getitem__(self, instance_id) -> InstanceRecord:
        return self.records[int(instance_id)]

    def __len__(self) -> int:
        return len(self.records)

    def ensure(self, instance_id: int, semantic_label: str = "unlabeled",
               movable: bool | None = None, step: int = 0) -> InstanceRecord:
        iid = int(instance_id)
        rec = self.records.get(iid)
        if rec is None:
            if movable is None:
                movable = iid not in self.background_ids
            if not movable:
                self.background_ids.add(iid)
            rec = InstanceRecord(iid, semantic_label, bool(movable), first_seen=step)
            self.records[iid] = rec
        return rec

    def is_background(self, instance_id: int) -> bool:
        return int(instance_id) in self.background_ids

    def append_transform(self, instance_id: int, step: int, T: RigidTransform) -> None:
        rec = self.records[int(instance_id)]
        if not rec.movable and not T.is_identity(1e-12):
            raise ValueError(f"background instance {instance_id} cannot move")
        rec.history.append((int(step), T))

    def label_of(self, instance_id: int) -> str:
        rec = self.records.get(int(instance_id))
        return rec.semantic_label if rec is not None else "unknown"

    def _index(self, grid: ParticleGrid):
        if self._cache_version != (id(grid), grid.version):
            live = grid.live()
            order = np.argsort(grid.inst[live], kind="stable")
            srt = live[order]
            ids, start, cnt = np.unique(grid.inst[srt], return_index=True, return_counts=True)
            self._cache = (srt, dict(zip(ids.tolist(), zip(start.tolist(), cnt.tolist()))))
            self._cache_version = (id(grid), grid.version)
        return self._cache

    def particle_indices(self, grid: ParticleGrid, instance_id: int) -> np.ndarray:
        srt, table = self._index(grid)
        hit = table.get(int(instance_id))
        if hit is None:
            return np.zeros(0, dtype=np.int64)
        s, c = hit
        return srt[s:s + c]

    def particle_count(self, grid: ParticleGrid, instance_id: int) -> int:
        return len(self.particle_indices(grid, instance_id))

    def garbage_collect(self, grid: ParticleGrid, max_empty_frames: int = 10) -> list[int]:
        """Forget instances that have had no particles for too long."""
        _, table = self._index(grid)
        dropped = []
        for iid, rec in list(self.records.items()):
            if iid in table:
                rec.empty_frames = 0
                continue
            rec.empty_frames += 1
            if rec.empty_frames > max_empty_frames and iid not in self.background_ids:
                del self.records[iid]
                dropped.append(iid)
        return dropped


def relocate_instance_particles(grid: ParticleGrid, registry: InstanceRegistry,
                                instance_id: int, T: RigidTransform,
                                rng: np.random.Generator | None = None) -> int:
    """Apply ``T`` to every particle of an instance and re-home them.

    Returns the number of particles that stayed inside the grid.
    """
    if instance_id not in registry:
        warnings.warn(f"relocate: unknown instance {instance_id}", RuntimeWarning, stacklevel=2)
        return 0
    idx = registry.particle_indices(grid, instance_id)
    if len(idx) == 0:
        return 0
    rng = np.random.default_rng(0) if rng is None else rng
    rep = grid.move(idx, T.apply(grid.pos[idx]), rng)
    return rep.accepted


# -- snapshot export --------------------------------------------------------

def write_snapshot(grid: ParticleGrid, path) -> int:
    live = grid.live()
    rec = np.zeros(len(live), dtype=SNAPSHOT_DTYPE)
    rec["cell"] = grid.code[live]
    rec["x"], rec["y"], rec["z"] = grid.pos[live].T
    rec["weight"] = grid.weight[live]
    rec["instance_id"] = grid.inst[live]
    rec["last_match_step"] = grid.last_match[live]
    header = "\n".join([
        SNAPSHOT_MAGIC,
        f"version {SNAPSHOT_VERSION}",
        f"m {grid.m}",
        f"l_voxel {grid.l_voxel!r}",
        "anchor " + " ".join(repr(float(v)) for v in grid.anchor),
        "origin " + " ".join(repr(float(v)) for v in grid.origin),
        "lo " + " ".join(str(int(v)) for v in grid.lo),
        f"records {len(rec)}",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())
    return len(rec)


def read_snapshot(path) -> tuple[dict, np.ndarray]:
    """Return ``(header, records)`` from a snapshot file."""
    with open(path, "rb") as fh:
        lines = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.decode("ascii").rstrip("\n")
            if line == "end_header":
                break
            lines.append(line)
        body = fh.read()
    if not lines or lines[0] != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic")
    header: dict = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        vals = rest.split()
        if key in ("version", "m", "records"):
            header[key] = int(vals[0])
        elif key == "l_voxel":
            header[key] = float(vals[0])
        elif key == "lo":
            header[key] = np.array([int(v) for v in vals])
        else:
            header[key] = np.array([float(v) for v in vals])
    rec = np.frombuffer(body, dtype=SNAPSHOT_DTYPE)
    if len(rec) != header.get("records", len(rec)):
        raise ValueError(f"{path}: record count mismatch")
    return header, rec
