from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phdmap import _kernels
from phdmap.filter import cell_id_sums
from phdmap.particle_store import (InstanceRegistry, InsertOutcome, Particle, ParticleGrid,
                                   morton_decode, morton_decode_array, morton_encode,
                                   morton_encode_array, read_snapshot, relocate_instance_particles,
                                   write_snapshot)
from phdmap.geometry import RigidTransform


def _interleave_oracle(ix, iy, iz, bits=21):
    out = 0
    for b in range(bits):
        out |= ((ix >> b) & 1) << (3 * b)
        out |= ((iy >> b) & 1) << (3 * b + 1)
        out |= ((iz >> b) & 1) << (3 * b + 2)
    return out


@given(st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1))
@settings(max_examples=200, deadline=None)
def test_morton_matches_bitwise_oracle(ix, iy, iz):
    code = morton_encode(ix, iy, iz)
    assert code == _interleave_oracle(ix, iy, iz)
    assert morton_decode(code) == (ix, iy, iz)
    arr = morton_encode_array(np.array([[ix, iy, iz]]))
    assert int(arr[0]) == code
    assert morton_decode_array(arr)[0].tolist() == [ix, iy, iz]


def _fill(grid, rng, n, ids=(5, 6, 7), spread=None):
    lo, hi = grid.bounds
    spread = hi - lo if spread is None else spread
    pos = lo + rng.random((n, 3)) * spread
    inst = rng.choice(np.array(ids), n)
    w = rng.random(n)
    return grid.insert(pos, inst, w, 0, rng, step=0)


def test_cell_codes_kernel_matches_numpy(rng):
    g = ParticleGrid(m=4, l_voxel=0.25, sensor_position=(0.3, -0.2, 0.1))
    lo, hi = g.bounds
    p = rng.uniform(lo - 1.0, hi + 1.0, size=(5000, 3))
    expected = g.code_of_global(g.voxel_index(p))
    assert np.array_equal(g.cell_of(p), expected)


def test_counting_order_is_stable_argsort(rng):
    codes = rng.integers(0, 64, 3000)
    assert np.array_equal(_kernels.counting_order(codes, 64), np.argsort(codes, kind="stable"))


def test_insert_respects_capacity_and_counts(rng):
    g = ParticleGrid(m=3, l_voxel=0.5, capacity=4)
    rep = _fill(g, rng, 4000)
    assert rep.accepted + rep.discarded_full + rep.discarded_out_of_range == 4000
    live = g.live()
    counts = np.bincount(g.code[live], minlength=g.n ** 3)
    assert np.array_equal(counts, g.count)
    assert counts.max() <= 4
    assert np.array_equal(g.cell_of(g.pos[live]), g.code[live])


def test_insert_particle_outcomes(rng):
    g = ParticleGrid(m=2, l_voxel=1.0, capacity=2)
    p = Particle(np.array([0.5, 0.5, 0.5]), 3, 1.0)
    assert g.insert_particle(p, rng, step=0) is InsertOutcome.ACCEPTED
    assert g.insert_particle(p, rng, step=0) is InsertOutcome.ACCEPTED
    # both residents were born this step, so nothing can be resampled
    assert g.insert_particle(p, rng, step=0) is InsertOutcome.DISCARDED_FULL
    assert g.insert_particle(p, rng, step=1) is InsertOutcome.RESAMPLED_THEN_ACCEPTED
    far = Particle(np.array([50.0, 0.0, 0.0]), 3, 1.0)
    assert g.insert_particle(far, rng, step=1) is InsertOutcome.DISCARDED_OUT_OF_RANGE
    with pytest.raises(ValueError):
        Particle(np.zeros(3), 0, 1.0)


def test_resample_preserves_cell_totals_and_winner(rng):
    g = ParticleGrid(m=3, l_voxel=0.5, capacity=8)
    _fill(g, rng, 3000)
    cells, cstart, pid, psum = cell_id_sums(g)
    before = np.add.reduceat(psum, cstart)
    n_before = g.count[cells].copy()
    g.resample_cells(cells, rng, step=1)
    cells2, cstart2, pid2, psum2 = cell_id_sums(g)
    assert np.array_equal(cells, cells2)
    after = np.add.reduceat(psum2, cstart2)
    assert np.allclose(after, before, rtol=1e-12, atol=0)
    # half the particles, or enough draws that the heaviest id is certain to survive
    pstop = np.append(cstart[1:], len(psum))
    for i, c in enumerate(cells):
        masses = psum[cstart[i]:pstop[i]]
        n = n_before[i]
        need = math.ceil(masses.sum() / masses.max() - 1e-9)
        want = n if n < 2 else min(n, max(n // 2, need))
        assert g.count[c] == want
        assert pid2[cstart2[i] + np.argmax(psum2[cstart2[i]:np.append(cstart2[1:], len(psum2))[i]])] \
            == pid[cstart[i] + np.argmax(masses)]


def test_resample_keeps_dominant_id_mass():
    g = ParticleGrid(m=2, l_voxel=1.0, capacity=8)
    rng = np.random.default_rng(0)
    p = np.full((6, 3), 0.5)
    g.insert(p, [4, 4, 4, 4, 9, 9], [1.0, 1.0, 1.0, 1.0, 0.01, 0.01], 0, rng, step=0)
    code = int(g.cell_of(p[:1])[0])
    g.resample_cell(code, rng, step=1)
    sums = g.weight_sum_by_id(code)
    assert sums[4] >= 4.0 - 1e-12
    assert g.weight_sum(code) == pytest.approx(4.02, rel=1e-12)


def test_recenter_scrolls_whole_voxels(rng):
    g = ParticleGrid(m=3, l_voxel=0.5, sensor_position=(0.0, 0.0, 0.0))
    _fill(g, rng, 2000)
    live = g.live()
    codes = dict(zip(live.tolist(), g.code[live].tolist()))
    rep = g.recenter((0.74, 0.0, 0.0))
    assert rep.shift.tolist() == [1, 0, 0]
    assert rep.residual == pytest.approx([0.24, 0.0, 0.0])
    assert rep.cells_cleared == 8 * 8
    live2 = g.live()
    assert len(live) - len(live2) == rep.particles_removed
    assert np.all(g.in_window(g.voxel_index(g.pos[live2])))
    # survivors keep their ring slot
    assert all(codes[i] == c for i, c in zip(live2.tolist(), g.code[live2].tolist()))
    assert np.array_equal(g.cell_of(g.pos[live2]), g.code[live2])
    # a sub-voxel move does nothing
    assert g.recenter((0.9, 0.1, 0.0)).particles_removed == 0


def test_move_rehomes_and_drops_outside(rng):
    g = ParticleGrid(m=3, l_voxel=0.5, capacity=8)
    reg = InstanceRegistry()
    reg.ensure(5, "car")
    g.insert(np.zeros((3, 3)) + 0.1, 5, 1.0, 0, rng, step=0)
    assert relocate_instance_particles(g, reg, 5, RigidTransform.from_translation((0.5, 0.0, 0.0)), rng) == 3
    live = g.live()
    assert np.allclose(g.pos[live, 0], 0.6)
    assert np.array_equal(g.code[live], g.cell_of(g.pos[live]))
    assert relocate_instance_particles(g, reg, 5, RigidTransform.from_translation((99.0, 0, 0)), rng) == 0
    assert g.n_live == 0 and g.count.sum() == 0


def test_registry_index_and_gc(rng):
    g = ParticleGrid(m=3, l_voxel=0.5)
    reg = InstanceRegistry()
    reg.ensure(1)
    reg.ensure(7, "car")
    assert reg.is_background(1) and reg[7].movable
    g.insert(np.full((2, 3), 0.1), 7, 1.0, 0, rng, step=0)
    assert reg.particle_count(g, 7) == 2
    g.invalidate(reg.particle_indices(g, 7))
    assert reg.particle_count(g, 7) == 0
    for _ in range(3):
        dropped = reg.garbage_collect(g, max_empty_frames=2)
    assert dropped == [7] and 1 in reg
    with pytest.raises(ValueError):
        reg.append_transform(1, 0, RigidTransform.from_translation((1.0, 0, 0)))


def test_snapshot_roundtrip(tmp_path, rng):
    g = ParticleGrid(m=3, l_voxel=0.5)
    _fill(g, rng, 200)
    path = tmp_path / "snap.bin"
    n = write_snapshot(g, path)
    head, rec = read_snapshot(path)
    live = g.live()
    assert n == len(rec) == len(live) and head["m"] == 3
    assert np.array_equal(rec["weight"], g.weight[live])
    assert np.array_equal(rec["instance_id"], g.inst[live])
    with open(path, "r+b") as fh:
        fh.write(b"X")
    with pytest.raises(ValueError):
        read_snapshot(path)


def test_compact_keeps_live_particles(rng):
    g = ParticleGrid(m=3, l_voxel=0.5)
    _fill(g, rng, 500)
    g.invalidate(g.live()[::2])
    w = g.weight[g.live()].copy()
    g.compact()
    assert g.size == g.n_live and np.array_equal(g.weight[:g.size], w)


def test_grid_validation():
    for kw in ({"m": 0}, {"m": 11}, {"l_voxel": 0.0}, {"capacity": 0}):
        with pytest.raises(ValueError):
            ParticleGrid(**kw)
