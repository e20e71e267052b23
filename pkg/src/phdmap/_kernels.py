"""Compiled inner loops of the weight update.

Both passes walk each measurement's activation box row by row. Visible
particles are sorted by flat pixel index, so the particles of one box row
form a single contiguous slice of the visible arrays.
"""

import math

import numpy as np
from numba import njit

_INV_TWO_PI_32 = (2.0 * math.pi) ** -1.5
# exponents beyond this contribute below 1e-17 of the peak density
_EXP_CUTOFF = 40.0


@njit(cache=True)
def _id_factor(zid, pid, plast, step, collective, p_tr, use_forget, speed, horizon):
    if zid == pid:
        return 1.0
    if not collective or p_tr == 0.0:
        return 0.0
    if not use_forget:
        return p_tr
    dk = step - plast
    if dk > horizon:
        return 0.0
    return p_tr * math.exp(-dk / speed)


@njit(cache=True)
def measurement_mass(mpos, mid, msig, boxes, start, width, vpos, vid, vw, vlast,
                     step, p_d, collective, p_tr, use_forget, speed, horizon):
    """C(z) for every measurement: sum of P_d * w * g over its box."""
    n_meas = mid.shape[0]
    out = np.zeros(n_meas)
    for m in range(n_meas):
        s = msig[m]
        inv2 = 0.5 / (s * s)
        peak = _INV_TWO_PI_32 / (s * s * s)
        zx, zy, zz = mpos[m, 0], mpos[m, 1], mpos[m, 2]
        zid = mid[m]
        acc = 0.0
        for v in range(boxes[m, 2], boxes[m, 3] + 1):
            j0 = start[v * width + boxes[m, 0]]
            j1 = start[v * width + boxes[m, 1] + 1]
            for j in range(j0, j1):
                dx = vpos[j, 0] - zx
                dy = vpos[j, 1] - zy
                dz = vpos[j, 2] - zz
                e = (dx * dx + dy * dy + dz * dz) * inv2
                if e > _EXP_CUTOFF:
                    continue
                fac = _id_factor(zid, vid[j], vlast[j], step, collective, p_tr,
                                 use_forget, speed, horizon)
                if fac == 0.0:
                    continue
                acc += p_d * vw[j] * fac * peak * math.exp(-e)
        out[m] = acc
    return out


@njit(cache=True)
def accumulate_gain(mpos, mid, msig, boxes, start, width, vpos, vid, vlast, mass,
                    step, p_d, kappa, collective, p_tr, use_forget, speed, horizon,
                    match_floor):
    """Per-particle sum of P_d * g / (kappa + C(z)) and same-id match flags."""
    n_vis = vid.shape[0]
    gain = np.zeros(n_vis)
    matched = np.zeros(n_vis, dtype=np.bool_)
    for m in range(mid.shape[0]):
        denom = kappa + mass[m]
        if denom <= 0.0:
            continue
        s = msig[m]
        inv2 = 0.5 / (s * s)
        peak = _INV_TWO_PI_32 / (s * s * s)
        floor = match_floor * peak
        zx, zy, zz = mpos[m, 0], mpos[m, 1], mpos[m, 2]
        zid = mid[m]
        for v in range(boxes[m, 2], boxes[m, 3] + 1):
            j0 = start[v * width + boxes[m, 0]]
            j1 = start[v * width + boxes[m, 1] + 1]
            for j in range(j0, j1):
                dx = vpos[j, 0] - zx
                dy = vpos[j, 1] - zy
                dz = vpos[j, 2] - zz
                e = (dx * dx + dy * dy + dz * dz) * inv2
                if e > _EXP_CUTOFF:
                    continue
                fac = _id_factor(zid, vid[j], vlast[j], step, collective, p_tr,
                                 use_forget, speed, horizon)
                if fac == 0.0:
                    continue
                dens = peak * math.exp(-e)
                gain[j] += p_d * fac * dens / denom
                if zid == vid[j] and dens >= floor:
                    matched[j] = True
    return gain, matched


# -- particle store helpers --------------------------------------------------------

@njit(cache=True)
def _spread(v):
    v &= 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


@njit(cache=True)
def cell_codes(pos, origin, l_voxel, lo, n):
    """Morton code of each position's ring slot, or -1 outside the window."""
    out = np.empty(pos.shape[0], dtype=np.int64)
    for i in range(pos.shape[0]):
        code = 0
        inside = True
        for a in range(3):
            g = int(math.floor((pos[i, a] - origin[a]) / l_voxel))
            if g < lo[a] or g >= lo[a] + n:
                inside = False
                break
            code |= _spread(np.int64(g % n)) << a
        out[i] = code if inside else -1
    return out


@njit(cache=True)
def counting_order(codes, n_cells):
    """Stable permutation sorting nonnegative ``codes`` below ``n_cells``."""
    counts = np.zeros(n_cells + 1, dtype=np.int64)
    for c in codes:
        counts[c + 1] += 1
    for k in range(n_cells):
        counts[k + 1] += counts[k]
    order = np.empty(codes.shape[0], dtype=np.int64)
    for i in range(codes.shape[0]):
        c = codes[i]
        order[counts[c]] = i
        counts[c] += 1
    return order
