"""End-to-end acceptance checks, one test per criterion.

Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured
values before asserting, so ``pytest -v`` output doubles as the report.
"""

from __future__ import annotations

import copy
import csv
import math
import os
import time
import warnings

import numpy as np
import pytest

from phdmap import OCCUPIED, SPECULATIVE, FilterParams, SemanticOccupancyMapper
from phdmap.cli import main, run_sequence
from phdmap.config import RunConfig
from phdmap.evaluation import (MetricsAccumulator, evaluate_frame, instance_recall,
                               voxel_keys)
from phdmap.filter import estimate_map, update
from phdmap.geometry import CameraModel
from phdmap.particle_store import ParticleGrid
from phdmap.simulator import GroundTruthBuilder, builtin_scene, render_sequence
from phdmap.visibility import activation_boxes, activation_extent, build_indices_image

from oracles import full_sum_update, micro_scene, sampled_extent

L_VOXEL = 0.2


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return emit


def test_c01_collective_reduces_to_individual(report):
    frames = list(render_sequence(builtin_scene("demo", frames=50), seed=0))
    t0 = time.perf_counter()
    cf = SemanticOccupancyMapper(FilterParams(update_mode="cf", p_tr=0.0, use_forgetting=False),
                                 m=6, memory=False).fit(frames)
    ind = SemanticOccupancyMapper(FilterParams(update_mode="if"), m=6, memory=False).fit(frames)
    dt = time.perf_counter() - t0
    a, b = cf.particle_weights(), ind.particle_weights()
    same_shape = a.shape == b.shape
    rel = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))) if same_shape and len(a) else math.inf
    ok = same_shape and rel <= 1e-12 and dt < 60.0
    report("C1 CF(p_tr=0, no forgetting) == IF", ok,
           f"{len(a)} particles, max rel diff {rel:.2e}, {dt:.1f} s for both runs")
    assert ok


def test_c02_resampling_conserves_weight(report):
    rng = np.random.default_rng(2)
    grid = ParticleGrid(m=2, l_voxel=1.0, capacity=8)
    lo = grid.bounds[0]
    cells = np.stack(np.meshgrid(*[np.arange(4)] * 3, indexing="ij"), -1).reshape(-1, 3)
    worst, calls = 0.0, 100_000
    t0 = time.perf_counter()
    for _ in range(calls):
        g = cells[rng.integers(len(cells))]
        code = int(grid.code_of_global(grid.voxel_index(lo + g + 0.5)[None])[0])
        have = int(grid.count[code])
        if have < 2:
            k = grid.capacity - have
            grid.insert(lo + g + rng.random((k, 3)), rng.integers(5, 9, k),
                        rng.exponential(0.1, k), 0, rng)
        before = grid.weight_sum(code)
        grid.resample_cell(code, rng)
        after = grid.weight_sum(code)
        worst = max(worst, abs(after - before) / before)
    dt = time.perf_counter() - t0

    # estimate with every cell resampled each frame vs the on-demand grid
    mapper = SemanticOccupancyMapper(m=6, memory=False)
    n_diff, frames = 0, 0
    for fr in render_sequence(builtin_scene("demo", frames=50), seed=0):
        mapper.partial_fit(fr)
        g2 = copy.deepcopy(mapper.grid_)
        before_tot = g2.weight[g2.live()].sum()
        g2.resample_cells(np.unique(g2.code[g2.live()]), np.random.default_rng(fr.step))
        worst = max(worst, abs(g2.weight[g2.live()].sum() - before_tot) / before_tot)
        M, F = mapper.map_, estimate_map(g2, mapper.registry_, mapper.params_, fr.step)
        same = (np.array_equal(M.voxels, F.voxels) and np.array_equal(M.status, F.status)
                and np.array_equal(M.instance_id, F.instance_id)
                and np.array_equal(M.semantic, F.semantic))
        n_diff += not same
        frames += 1
    ok = worst <= 1e-12 and n_diff == 0
    report("C2 resampling conserves weight", ok,
           f"{calls} resample_cell calls in {dt:.1f} s, worst rel change {worst:.1e}; "
           f"forced vs on-demand estimate differs on {n_diff}/{frames} frames")
    assert ok


def test_c03_restricted_update_matches_full_sum(report):
    rng = np.random.default_rng(3)
    modes = [FilterParams(), FilterParams(use_forgetting=False), FilterParams(update_mode="if")]
    worst, n_part = 0.0, 0
    for i in range(100):
        p = modes[i % 3]
        grid, frame = micro_scene(rng, p)
        img = build_indices_image(grid, frame.camera, frame.pose, frame.depth, frame.step,
                                  slack=lambda d: 3.0 * p.sigma(d))
        vis = img.particles
        pos, ids, w, last = (grid.pos[vis].copy(), grid.inst[vis].copy(), grid.weight[vis].copy(),
                             grid.last_match[vis].copy())
        update(grid, img, frame, p, frame.step)
        want = full_sum_update(pos, ids, w, last, frame.points, frame.point_ids,
                               p.sigma(frame.point_depths), p, frame.step)
        err = np.abs(grid.weight[vis] - want) / np.maximum(np.abs(want), 1e-300)
        worst = max(worst, float(err.max()) if len(err) else 0.0)
        n_part += len(vis)
    ok = worst <= 1e-9
    report("C3 box-restricted update == full sum", ok,
           f"100 micro-scenes, {n_part} visible particles, worst rel error {worst:.1e}")
    assert ok


def test_c04_activation_box_bounds_sampled_outline(report):
    rng = np.random.default_rng(4)
    worst_over, violations = 0.0, 0
    t0 = time.perf_counter()
    for _ in range(1000):
        w, h = int(rng.integers(16, 1280)), int(rng.integers(16, 960))
        cam = CameraModel(float(rng.uniform(0.3, 2.0) * w), float(rng.uniform(0.3, 0.7) * w),
                          float(rng.uniform(0.3, 0.7) * h), w, h)
        l = float(rng.uniform(0.01, 1.0))
        z = float(rng.uniform(l * 1.05, 30.0))
        x, y = rng.uniform(-0.6, 0.6, 2) * z
        box = activation_boxes(cam, np.array([[x, y, z]]), np.array([l]), n_pix=0)[0][0]
        u0, u1, v0, v1 = activation_extent(x, y, z, l, cam.f, cam.cx, cam.cy)
        s = sampled_extent(x, y, z, l, cam.f, cam.cx, cam.cy)
        # continuous extent: never inside the sampled outline, at most 1 px outside
        over = max(s[0] - u0, u1 - s[1], s[2] - v0, v1 - s[3])
        under = max(u0 - s[0], s[1] - u1, v0 - s[2], s[3] - v1)
        # integer box holds the floor of the sampled box after the same clamping
        fs = np.floor(np.array(s))
        ref = np.array([np.clip(fs[0], 0, w - 1), np.clip(fs[1], 0, w - 1),
                        np.clip(fs[2], 0, h - 1), np.clip(fs[3], 0, h - 1)])
        holds = box[0] <= ref[0] and box[1] >= ref[1] and box[2] <= ref[2] and box[3] >= ref[3]
        excess = max(ref[0] - box[0], box[1] - ref[1], ref[2] - box[2], box[3] - ref[3])
        if under > 1e-9 or over >= 1.0 or not holds or excess >= 1:
            violations += 1
        worst_over = max(worst_over, over)
    dt = time.perf_counter() - t0
    ok = violations == 0
    report("C4 activation box vs sampled outline", ok,
           f"1000 configs in {dt:.1f} s, {violations} violations, widest margin {worst_over:.1e} px")
    assert ok


def _footprint(obj, step, grid_idx):
    c = (grid_idx + 0.5) * L_VOXEL
    return (np.abs(c - obj.pose_at(step).translation) < 0.5).all(1)


def test_c05_trace_noise_clears(report):
    sc = builtin_scene("trace", frames=20)
    box = sc.object(100)
    mp = SemanticOccupancyMapper(FilterParams(q=0.0), m=6, memory=False)
    gtb = GroundTruthBuilder(sc, L_VOXEL)
    maps, adms = {}, {}
    for fr in render_sequence(sc, seed=0):
        mp.partial_fit(fr)
        gtb.observe(fr.pose, fr.step)
        m = evaluate_frame(mp.map_, gtb.voxelize(fr.step, mp.grid_.bounds))
        maps[fr.step], adms[fr.step] = mp.map_, m.adm
    g = np.stack(np.meshgrid(*[np.arange(-30, 30)] * 3, indexing="ij"), -1).reshape(-1, 3)
    lingering, checked = 0, 0
    for k in range(1, 20):
        vacated = g[_footprint(box, k - 1, g) & ~_footprint(box, k, g)]
        if len(vacated) and k + 5 <= 19:
            checked += len(vacated)
            lingering += int((maps[k + 5].status_at(vacated) == OCCUPIED).sum())
    late = [adms[k] for k in adms if k > 3]
    worst_adm = max(late)
    ok = lingering == 0 and checked > 0 and worst_adm <= L_VOXEL
    report("C5 trace noise clears", ok,
           f"{lingering}/{checked} vacated voxels still occupied 5 frames later; "
           f"max ADm after frame 3 = {worst_adm:.3f} m (limit {L_VOXEL})")
    assert ok


def _switch_run(mode, frames=20):
    sc = builtin_scene("switch", frames=frames, switch_step=8)
    mp = SemanticOccupancyMapper(FilterParams(q=0.0, update_mode=mode), m=6, memory=False)
    gtb = GroundTruthBuilder(sc, L_VOXEL)
    retained, new_frac = {}, {}
    for fr in render_sequence(sc, seed=0):
        mp.partial_fit(fr)
        gtb.observe(fr.pose, fr.step)
        gt = gtb.voxelize(fr.step)
        gk = voxel_keys(gt.voxels[gt.instance_id == 100])
        M = mp.map_
        occ = M.status == OCCUPIED
        ek, eid = voxel_keys(M.voxels[occ]), M.instance_id[occ]
        hit = np.isin(gk, ek)
        retained[fr.step] = hit.mean() if len(gk) else math.nan
        new_frac[fr.step] = np.isin(gk, ek[eid == 150]).sum() / max(1, hit.sum())
    return retained, new_frac, mp.params_


def test_c06_collective_update_keeps_relabeled_object(report):
    cf, _, _ = _switch_run("cf")
    ind, _, _ = _switch_run("if")
    k = 8  # first frame whose measurements carry the new id
    ok = cf[k] >= 0.8 and ind[k] < 0.5
    report("C6 object kept through id switch", ok,
           f"retained at step {k}: CF {cf[k]:.2f} (>= 0.8), IF {ind[k]:.2f} (< 0.5); "
           f"step {k + 1}: CF {cf[k + 1]:.2f}, IF {ind[k + 1]:.2f}")
    assert ok


def test_c07_forgetting_hands_space_to_new_id(report):
    _, frac, p = _switch_run("cf")
    first = 8 + p.forget_horizon + 2
    tail = {k: v for k, v in frac.items() if k >= first}
    worst = min(tail.values())
    ok = worst >= 0.95
    report("C7 new id takes over", ok,
           f"min new-id fraction over steps {first}..{max(tail)} = {worst:.2f} (>= 0.95)")
    assert ok


def _memory_run(seed, memory):
    sc = builtin_scene("memory", seed=seed)
    mp = SemanticOccupancyMapper(FilterParams(q=0.0), m=6, memory=memory, completeness_threshold=0.85,
                                 trigger_points=300, random_state=seed)
    gtb = GroundTruthBuilder(sc, L_VOXEL)
    gtb.observe_all_around(200)
    rec, early, spec = [], 0, 0
    for fr in render_sequence(sc, seed=seed):
        mp.partial_fit(fr)
        g = mp.grid_
        live = g.live()
        # voxels holding only unconfirmed template particles
        u, inv = np.unique(g.code[live], return_inverse=True)
        confirmed = np.bincount(inv, weights=(~g.pending[live]).astype(float), minlength=len(u))
        vox = g.global_of_code(u[confirmed == 0])
        if len(vox):
            st = mp.map_.status_at(vox)
            early += int((st == OCCUPIED).sum())
            spec += int((st == SPECULATIVE).sum())
        M = mp.map_
        sel = M.status > 0
        gt = gtb.voxelize(fr.step)
        rec.append(instance_recall(M.voxels[sel], M.instance_id[sel], gt.voxels, gt.instance_id, 200))
    rec = np.nan_to_num(np.array(rec))
    steady = rec[-5:].mean()
    return int(np.argmax(rec >= 0.9 * steady)), early, spec, len(mp.matches_)


def test_c08_memory_speeds_up_recall(report):
    lines, wins, early_total, spec_total = [], 0, 0, 0
    for seed in range(5):
        k_mem, early, spec, n_match = _memory_run(seed, True)
        k_plain, _, _, _ = _memory_run(seed, False)
        wins += k_mem < k_plain
        early_total += early
        spec_total += spec
        lines.append(f"seed {seed}: {k_mem} vs {k_plain} ({n_match} matches)")
    ok = wins == 5 and early_total == 0 and spec_total > 0
    report("C8 memory speeds up recall", ok,
           f"earlier on {wins}/5 seeds [{'; '.join(lines)}]; template-only voxels "
           f"speculative {spec_total} times, occupied {early_total} times")
    assert ok


def test_c09_static_scene_quality(report):
    sc = builtin_scene("static", frames=100)
    mp = SemanticOccupancyMapper(FilterParams(q=0.0), m=6, memory=False)
    gtb = GroundTruthBuilder(sc, L_VOXEL)
    acc = MetricsAccumulator()
    for fr in render_sequence(sc, seed=0):
        mp.partial_fit(fr)
        gtb.observe(fr.pose, fr.step)
        acc.add(evaluate_frame(mp.map_, gtb.voxelize(fr.step, mp.grid_.bounds)))
    agg = acc.mean()
    ok = agg["f1"] >= 0.95 and agg["ahd"] <= 0.5 * L_VOXEL and agg["miou_3d"] >= 0.9
    report("C9 static scene quality", ok,
           f"F1 {agg['f1']:.3f} (>= 0.95), AHD {agg['ahd']:.3f} m (<= {0.5 * L_VOXEL}), "
           f"mIoU {agg['miou_3d']:.3f} (>= 0.9)")
    assert ok


def test_c10_throughput(report, tmp_path):
    out = tmp_path / "bench"
    rc = main(["bench", "--extents", "25.6", "--width", "640", "--height", "480",
               "--frames", "12", "--warmup", "2", "--out", str(out)])
    assert rc == 0
    with open(out / "bench.csv") as fh:
        row = next(csv.DictReader(fh))
    total = float(row["total_ms"])
    stages = ", ".join(f"{k[:-3]} {float(v):.0f}" for k, v in row.items() if k.endswith("_ms"))
    fast = total <= 500.0
    report("C10 throughput (informational)", True,
           f"25.6 m, 640x480, {row['frames']} frames: {stages} ms per frame"
           + ("" if fast else " [WARN above 500 ms]"))
    if not fast:
        warnings.warn(f"mean frame time {total:.0f} ms exceeds 500 ms", RuntimeWarning)


def _tree(d):
    out = {}
    for root, _, names in os.walk(d):
        for n in names:
            if n != "timing.csv":
                p = os.path.join(root, n)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, d)] = fh.read()
    return out


def test_c11_runs_are_reproducible(report, tmp_path):
    over = {"run.frames": 10, "grid.m": 6, "run.seed": 11}
    for d in ("a", "b"):
        run_sequence(RunConfig.load(env={}, overrides=over), str(tmp_path / d))
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not diff and any(k.startswith("maps") for k in a) and "metrics.csv" in a
    report("C11 byte-identical reruns", ok,
           f"{len(a)} files compared (wall-clock timing.csv excluded), {len(diff)} differ")
    assert ok
