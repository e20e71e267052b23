"""Command line: simulate, map, eval and bench."""

from __future__ import annotations

import argparse
import csv
import inspect
import logging
import math
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig
from .estimator import STAGES, SemanticOccupancyMapper
from .evaluation import (METRIC_FIELDS, FrameMetrics, MetricsAccumulator, evaluate_frame,
                         write_metrics_csv)
from .filter import LabeledVoxelMap, OCCUPIED
from .memory import TemplateLibrary
from .simulator import (SCENES, GroundTruthBuilder, GroundTruthMap, builtin_scene, load_scene,
                        read_ground_truth, read_sequence, render_sequence, save_scene,
                        write_sequence)

log = logging.getLogger("phdmap")


# -- scene and frame sources ----------------------------------------------------------

def make_scene(cfg: RunConfig):
    """Scene from ``run.scene_file`` or the built-in ``run.scene``, with configured noise."""
    if cfg["run.scene_file"]:
        scene = load_scene(cfg["run.scene_file"])
        if cfg["run.frames"] is not None:
            scene.frames = cfg["run.frames"]
    else:
        name = cfg["run.scene"]
        if name not in SCENES:
            raise ConfigError(f"run.scene: unknown scene {name!r}; choose from {sorted(SCENES)}")
        wanted = {"frames": cfg["run.frames"], "width": cfg["camera.width"],
                  "height": cfg["camera.height"], "seed": cfg["run.seed"]}
        accepted = inspect.signature(SCENES[name]).parameters
        scene = builtin_scene(name, **{k: v for k, v in wanted.items()
                                       if k in accepted and v is not None})
    noise = cfg.noise()
    if noise.to_dict() != type(noise)().to_dict():
        scene.noise = noise
    return scene


def make_mapper(cfg: RunConfig) -> SemanticOccupancyMapper:
    return SemanticOccupancyMapper(
        filter_params=cfg.filter_params(), m=cfg["grid.m"], l_voxel=cfg["grid.l_voxel"],
        origin=tuple(cfg["grid.origin"]), memory=cfg["memory.enabled"],
        completeness_threshold=cfg["memory.completeness_threshold"], n_rays=cfg["memory.n_rays"],
        trigger_points=cfg["memory.trigger_points"], match_iterations=cfg["memory.match_iterations"],
        score_threshold=cfg["memory.score_threshold"], early_exit=cfg["memory.early_exit"],
        prune_ratio=cfg["memory.prune_ratio"], random_state=cfg["run.seed"])


def gt_as_estimate(gt: GroundTruthMap, n: int = 0) -> LabeledVoxelMap:
    """A ground-truth map dressed as an estimate with every voxel occupied."""
    k = len(gt.voxels)
    lo = gt.voxels.min(axis=0) if k else np.zeros(3, np.int64)
    return LabeledVoxelMap(gt.voxels.copy(), np.full(k, OCCUPIED, np.uint8), gt.instance_id.copy(),
                           gt.semantic.copy(), np.ones(k), gt.l_voxel, np.asarray(gt.origin, float),
                           lo, n, gt.step)


# -- the driver -----------------------------------------------------------------------

def _nan_metrics(step: int) -> FrameMetrics:
    vals = {k: (step if k == "step" else (0 if k.startswith("n_") or k == "adm_flagged" else math.nan))
            for k in METRIC_FIELDS}
    return FrameMetrics(**vals)


def _write_timing(path, rows: list[dict]) -> None:
    cols = ["step", *STAGES, "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["step"]] + [f"{1000.0 * r[c]:.3f}" for c in cols[1:]])
        if rows:
            w.writerow(["mean"] + [f"{1000.0 * np.mean([r[c] for r in rows]):.3f}" for c in cols[1:]])


def run_sequence(cfg: RunConfig, out: str | None = None) -> dict:
    """Map a simulated or replayed sequence and write all artifacts under ``out``.

    Artifacts: ``config.yaml`` (effective configuration), ``maps/NNNNNN.txt``,
    ``metrics.csv`` (per frame plus aggregate; when ground truth exists),
    ``timing.csv`` (per-stage milliseconds) and ``templates/`` when a
    library directory is configured. Returns a small summary.
    """
    out = out or cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.yaml"))
    mapper = make_mapper(cfg)
    lib_dir = cfg["memory.library"]
    if lib_dir and os.path.isdir(lib_dir):
        mapper.library_ = TemplateLibrary.load(lib_dir)
    evaluate = cfg["run.evaluate"]
    if cfg["run.input"] == "replay":
        frames = read_sequence(cfg["run.replay_dir"])
        gts = {g.step: g for g in read_ground_truth(cfg["run.replay_dir"])} if evaluate else {}
        builder = scene = None
    else:
        scene = make_scene(cfg)
        frames = render_sequence(scene, seed=cfg["run.seed"])
        builder = GroundTruthBuilder(scene, cfg["grid.l_voxel"], cfg["grid.origin"]) if evaluate else None
        gts = {}
    if cfg["run.export_maps"]:
        os.makedirs(os.path.join(out, "maps"), exist_ok=True)
    rows, timing = [], []
    acc = MetricsAccumulator()
    n = 0
    for fr in frames:
        if cfg["run.frames"] is not None and n >= cfg["run.frames"]:
            break
        t0 = time.perf_counter()
        mapper.partial_fit(fr)
        t = dict(mapper.last_timings_)
        t["total"] = time.perf_counter() - t0
        t["step"] = fr.step
        timing.append(t)
        log.info("step %d: %s", fr.step, " ".join(f"{k}={1000 * v:.1f}ms" for k, v in t.items()
                                                  if k != "step"))
        if cfg["run.export_maps"]:
            mapper.map_.to_text(os.path.join(out, "maps", f"{fr.step:06d}.txt"))
        if evaluate:
            try:
                if builder is not None:
                    builder.observe(fr.pose, fr.step)
                    gt = builder.voxelize(fr.step, mapper.grid_.bounds)
                else:
                    gt = gts.get(fr.step)
                m = evaluate_frame(mapper.map_, gt) if gt is not None else None
            except Exception as e:  # metrics must never stop the mapping
                log.warning("step %d: evaluation failed: %s", fr.step, e)
                m = None
            if m is not None:
                rows.append(m)
                acc.add(m)
            elif builder is not None or gts:
                rows.append(_nan_metrics(fr.step))
        n += 1
    if evaluate and (rows or n == 0):
        write_metrics_csv(os.path.join(out, "metrics.csv"), rows, acc.mean())
    _write_timing(os.path.join(out, "timing.csv"), timing)
    if lib_dir and hasattr(mapper, "library_") and mapper.library_ is not None:
        mapper.library_.save(lib_dir)
    return {"frames": n, "out": out, "aggregate": acc.mean() if rows else {}}


# -- subcommands ----------------------------------------------------------------------

def _overrides(args) -> dict:
    o = {"run.seed": args.seed, "run.frames": args.frames, "grid.m": args.map_size,
         "grid.l_voxel": args.voxel, "filter.update_mode": args.mode, "run.out": args.out}
    if args.no_memory:
        o["memory.enabled"] = False
    return o


def cmd_simulate(args) -> int:
    o = _overrides(args)
    if args.scene:
        o["run.scene"] = args.scene
    cfg = RunConfig.load(args.config, overrides=o)
    scene = make_scene(cfg)
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    frames = list(render_sequence(scene, seed=cfg["run.seed"]))
    builder = GroundTruthBuilder(scene, cfg["grid.l_voxel"], cfg["grid.origin"])
    gts = []
    for fr in frames:
        builder.observe(fr.pose, fr.step)
        gts.append(builder.voxelize(fr.step))
    write_sequence(out, frames, gts)
    save_scene(scene, os.path.join(out, "scene.yaml"))
    cfg.save(os.path.join(out, "config.yaml"))
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_map(args) -> int:
    o = _overrides(args)
    if args.input:
        o["run.input"] = "replay"
        o["run.replay_dir"] = args.input
    if args.scene:
        o["run.scene"] = args.scene
    cfg = RunConfig.load(args.config, overrides=o)
    summary = run_sequence(cfg)
    agg = summary["aggregate"]
    print(f"mapped {summary['frames']} frames into {summary['out']}")
    if agg:
        print(" ".join(f"{k}={agg[k]:.4f}" for k in ("ahd", "precision", "recall", "f1", "miou_3d")
                       if k in agg))
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, overrides=_overrides(args))
    est_files = sorted(f for f in os.listdir(args.maps) if f.endswith(".txt"))
    gts = {g.step: g for g in read_ground_truth(args.gt)}
    if not gts and os.path.isdir(args.gt):
        gts = {g.step: g for g in (GroundTruthMap.from_text(os.path.join(args.gt, f))
                                   for f in sorted(os.listdir(args.gt)) if f.endswith(".txt"))}
    rows, acc = [], MetricsAccumulator()
    for f in est_files:
        est = LabeledVoxelMap.from_text(os.path.join(args.maps, f))
        gt = gts.get(est.step)
        if gt is None:
            log.warning("no ground truth for step %d", est.step)
            continue
        m = evaluate_frame(est, gt)
        rows.append(m)
        acc.add(m)
    out = args.out or cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.csv")
    write_metrics_csv(path, rows, acc.mean())
    print(f"evaluated {len(rows)} frames -> {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = RunConfig.load(args.config, overrides=_overrides(args))
    out = cfg["run.out"]
    os.makedirs(out, exist_ok=True)
    l = cfg["grid.l_voxel"]
    rows = []
    for extent in args.extents:
        m = int(round(math.log2(extent / l)))
        if not math.isclose(l * 2 ** m, extent, rel_tol=1e-6):
            raise ConfigError(f"extent {extent} m is not a power-of-two multiple of {l} m voxels")
        c = RunConfig.load(args.config, overrides={**_overrides(args), "grid.m": m,
                                                    "camera.width": args.width,
                                                    "camera.height": args.height,
                                                    "run.evaluate": False, "run.export_maps": False})
        scene = make_scene(c)
        mapper = make_mapper(c)
        per = {s: [] for s in (*STAGES, "total")}
        for i, fr in enumerate(render_sequence(scene, seed=c["run.seed"])):
            if c["run.frames"] is not None and i >= c["run.frames"]:
                break
            t0 = time.perf_counter()
            mapper.partial_fit(fr)
            total = time.perf_counter() - t0
            if i < args.warmup:
                continue
            for s in STAGES:
                per[s].append(mapper.last_timings_[s])
            per["total"].append(total)
        row = {"extent_m": extent, "m": m, "frames": len(per["total"])}
        row.update({f"{s}_ms": 1000.0 * float(np.mean(v)) if v else math.nan for s, v in per.items()})
        rows.append(row)
        print(f"{extent:6.1f} m: " + " ".join(f"{s}={row[s + '_ms']:.1f}ms" for s in (*STAGES, "total")))
    path = os.path.join(out, "bench.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["extent_m"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with dotted keys (see README)")
    common.add_argument("--seed", type=int, help="random seed for simulation and mapping")
    common.add_argument("--frames", type=int, help="process at most this many frames")
    common.add_argument("--map-size", type=int, dest="map_size",
                        help="voxels per axis as a power of two exponent (7 means 128)")
    common.add_argument("--voxel", type=float, help="voxel edge length in meters")
    common.add_argument("--mode", choices=("if", "cf"), help="update mode")
    common.add_argument("--no-memory", action="store_true", dest="no_memory",
                        help="disable the template library")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-frame timings")

    p = argparse.ArgumentParser(prog="phdmap", description="Instance-aware particle occupancy mapping.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="render a built-in or YAML scene to a replay directory")
    s.add_argument("--scene", help=f"built-in scene: {', '.join(sorted(SCENES))}")
    s.set_defaults(func=cmd_simulate)
    m = sub.add_parser("map", parents=[common], help="map a replay directory or a simulated scene")
    m.add_argument("--input", help="replay directory written by 'simulate'")
    m.add_argument("--scene", help="built-in scene when no --input is given")
    m.set_defaults(func=cmd_map)
    e = sub.add_parser("eval", parents=[common], help="score exported maps against ground truth")
    e.add_argument("--maps", required=True, help="directory of exported map files")
    e.add_argument("--gt", required=True, help="replay directory (with gt/) or directory of GT maps")
    e.set_defaults(func=cmd_eval)
    b = sub.add_parser("bench", parents=[common], help="per-stage timing over map extents")
    b.add_argument("--extents", type=float, nargs="+", default=[12.8, 25.6],
                   help="map extents in meters (default: 12.8 25.6)")
    b.add_argument("--width", type=int, default=640)
    b.add_argument("--height", type=int, default=480)
    b.add_argument("--warmup", type=int, default=2, help="frames excluded from the averages")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"phdmap: configuration error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"phdmap: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
