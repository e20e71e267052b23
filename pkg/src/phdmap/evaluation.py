"""Map quality metrics against ground-truth labeled voxels."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraModel, Pose

_OFF = 1 << 20


def voxel_keys(voxels) -> np.ndarray:
    """Pack integer voxel triples (|i| < 2**20) into sortable int64 keys."""
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3) + _OFF
    return (v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2]


def _nn_mean(a: np.ndarray, b: np.ndarray) -> float:
    d, _ = cKDTree(b).query(a)
    return float(np.mean(d))


def ahd(est_centers, gt_centers) -> float:
    """Average Hausdorff distance; NaN when either set is empty."""
    a = np.asarray(est_centers, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return math.nan
    return 0.5 * (_nn_mean(a, b) + _nn_mean(b, a))


def precision_recall_f1(est_voxels, gt_voxels) -> tuple[float, float, float]:
    e = np.unique(voxel_keys(est_voxels))
    g = np.unique(voxel_keys(gt_voxels))
    tp = len(np.intersect1d(e, g, assume_unique=True))
    p = tp / len(e) if len(e) else 0.0
    r = tp / len(g) if len(g) else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def adm(gt_movable_centers, est_centers, worst: float = math.nan) -> tuple[float, bool]:
    """Mean distance from movable-object GT voxels to the nearest estimated voxel.

    Returns ``(value, flagged)``; with no estimated voxels the value is
    ``worst`` and the flag is set. NaN when there are no movable GT voxels.
    """
    g = np.asarray(gt_movable_centers, dtype=np.float64).reshape(-1, 3)
    e = np.asarray(est_centers, dtype=np.float64).reshape(-1, 3)
    if len(g) == 0:
        return math.nan, False
    if len(e) == 0:
        return float(worst), True
    return _nn_mean(g, e), False


def class_iou(est_keys, est_labels, gt_keys, gt_labels) -> dict[str, float]:
    """Per-class IoU of labeled element sets, for classes present in either set."""
    est_labels = np.asarray(est_labels, dtype=object)
    gt_labels = np.asarray(gt_labels, dtype=object)
    out = {}
    for c in sorted(set(gt_labels.tolist()) | set(est_labels.tolist())):
        e = np.unique(np.asarray(est_keys)[est_labels == c])
        g = np.unique(np.asarray(gt_keys)[gt_labels == c])
        inter = len(np.intersect1d(e, g, assume_unique=True))
        union = len(e) + len(g) - inter
        if union:
            out[c] = inter / union
    return out


def mean_iou(per_class: dict[str, float], gt_classes) -> float:
    cls = [c for c in sorted(set(gt_classes)) if c in per_class]
    return float(np.mean([per_class[c] for c in cls])) if cls else math.nan


def miou_3d(est_voxels, est_labels, gt_voxels, gt_labels) -> tuple[dict[str, float], float]:
    per = class_iou(voxel_keys(est_voxels), est_labels, voxel_keys(gt_voxels), gt_labels)
    return per, mean_iou(per, np.asarray(gt_labels, dtype=object).tolist())


def splat(centers, values, cam: CameraModel, pose: Pose, mode: str = "point",
          l_voxel: float | None = None, fill=0) -> np.ndarray:
    """Rasterize voxel centers into an image, nearest voxel wins per pixel.

    ``mode='point'`` writes each center's own pixel; ``'square'`` fills the
    pixel square covered by the voxel's projected extent.
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    vals = np.asarray(values)
    img = np.full(cam.shape, fill, dtype=vals.dtype if len(vals) else object)
    if len(c) == 0:
        return img
    pc = pose.to_camera(c)
    u, v, ok = cam.project_points(pc)
    if mode == "square":
        if l_voxel is None:
            raise ValueError("square splats need l_voxel")
        ok = pc[:, 2] > 0
    idx = np.flatnonzero(ok)
    idx = idx[np.argsort(-pc[idx, 2], kind="stable")]   # far first, near overwrites
    if mode == "point":
        iu = np.floor(u[idx]).astype(np.int64)
        iv = np.floor(v[idx]).astype(np.int64)
        img[iv, iu] = vals[idx]
        return img
    for i in idx:
        r = 0.5 * l_voxel * cam.f / pc[i, 2]
        u0, u1 = int(max(0, math.floor(u[i] - r))), int(min(cam.width, math.ceil(u[i] + r)))
        v0, v1 = int(max(0, math.floor(v[i] - r))), int(min(cam.height, math.ceil(v[i] + r)))
        if u0 < u1 and v0 < v1:
            img[v0:v1, u0:u1] = vals[i]
    return img


def miou_2d(est_image, gt_image, background="") -> tuple[dict[str, float], float]:
    """Per-class pixel IoU between two label images; ``background`` pixels are unlabeled."""
    e = np.asarray(est_image, dtype=object).ravel()
    g = np.asarray(gt_image, dtype=object).ravel()
    keys = np.arange(len(e))
    em, gm = e != background, g != background
    per = class_iou(keys[em], e[em], keys[gm], g[gm])
    return per, mean_iou(per, g[gm].tolist())


def instance_mf1(est_keys, est_ids, gt_keys, gt_ids) -> float:
    """Mean instance F1 with greedy one-to-one matching above IoU 0.5.

    Unmatched ground-truth instances score 0. Id 0 marks unlabeled elements.
    """
    est_keys, est_ids = np.asarray(est_keys), np.asarray(est_ids)
    gt_keys, gt_ids = np.asarray(gt_keys), np.asarray(gt_ids)
    gts = [i for i in np.unique(gt_ids).tolist() if i != 0]
    if not gts:
        return math.nan
    ests = [i for i in np.unique(est_ids).tolist() if i != 0]
    G = {g: np.unique(gt_keys[gt_ids == g]) for g in gts}
    E = {e: np.unique(est_keys[est_ids == e]) for e in ests}
    pairs = []
    for g in gts:
        for e in ests:
            inter = len(np.intersect1d(G[g], E[e], assume_unique=True))
            if inter:
                iou = inter / (len(G[g]) + len(E[e]) - inter)
                pairs.append((iou, g, e, inter))
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_g, used_e = set(), set()
    score = {g: 0.0 for g in gts}
    for iou, g, e, inter in pairs:
        if iou <= 0.5:
            break
        if g in used_g or e in used_e:
            continue
        used_g.add(g)
        used_e.add(e)
        score[g] = 2.0 * inter / (len(G[g]) + len(E[e]))
    return float(np.mean([score[g] for g in gts]))


def instance_recall(est_voxels, est_ids, gt_voxels, gt_ids, instance_id: int,
                    accept_ids=None) -> float:
    """Fraction of an instance's GT voxels estimated occupied with an accepted id."""
    accept = {instance_id} if accept_ids is None else set(accept_ids)
    g = np.unique(voxel_keys(np.asarray(gt_voxels)[np.asarray(gt_ids) == instance_id]))
    if len(g) == 0:
        return math.nan
    ek = voxel_keys(est_voxels)
    sel = np.isin(np.asarray(est_ids), list(accept))
    return len(np.intersect1d(g, np.unique(ek[sel]), assume_unique=True)) / len(g)


# -- per-frame evaluation ----------------------------------------------------------

@dataclass
class FrameMetrics:
    step: int
    ahd: float
    precision: float
    recall: float
    f1: float
    adm: float
    adm_flagged: int
    miou_3d: float
    mf1_3d: float
    miou_2d: float
    mf1_2d: float
    spec_recall: float
    n_occupied: int
    n_speculative: int
    n_gt: int


METRIC_FIELDS = [f.name for f in fields(FrameMetrics)]


def gt_label_images(scene, cam: CameraModel, pose: Pose, step: int):
    """Noiseless semantic and instance images of a simulated scene."""
    from .simulator import trace
    _, ids = trace(scene, pose, step, cam)
    sem = np.full(ids.shape, "", dtype=object)
    for o in scene.objects:
        sem[ids == o.instance_id] = o.semantic_label
    return sem, ids.astype(np.int64)


def evaluate_frame(est, gt, cam: CameraModel | None = None, pose: Pose | None = None,
                   gt_images=None, splat_mode: str = "point") -> FrameMetrics:
    """Compare a LabeledVoxelMap with a GroundTruthMap.

    Only occupied voxels count as estimated surface; speculative voxels are
    reported through ``spec_recall``, the share of GT voxels not occupied
    but speculatively occupied. 2D scores need ``cam``, ``pose`` and
    ``gt_images = (semantic_image, instance_image)``.
    """
    occ = est.status == 1
    spec = est.status == 2
    ev = est.voxels[occ]
    ec = est.centers(occ)
    gc = gt.centers()
    a = ahd(ec, gc)
    p, r, f = precision_recall_f1(ev, gt.voxels)
    worst = float(np.linalg.norm(np.full(3, est.n * est.l_voxel))) if est.n else math.nan
    d, flag = adm(gt.centers(gt.movable), ec, worst)
    _, m3 = miou_3d(ev, est.semantic[occ], gt.voxels, gt.semantic)
    f3 = instance_mf1(voxel_keys(ev), est.instance_id[occ], voxel_keys(gt.voxels), gt.instance_id)
    gk = voxel_keys(gt.voxels)
    missed = ~np.isin(gk, voxel_keys(ev))
    sr = (float(np.isin(gk[missed], voxel_keys(est.voxels[spec])).mean())
          if missed.any() else math.nan)
    m2 = f2 = math.nan
    if cam is not None and pose is not None and gt_images is not None:
        gsem, gid = gt_images
        esem = splat(ec, est.semantic[occ].astype(object), cam, pose, splat_mode, est.l_voxel, fill="")
        eid = splat(ec, est.instance_id[occ], cam, pose, splat_mode, est.l_voxel, fill=0)
        _, m2 = miou_2d(esem, gsem)
        keys = np.arange(gid.size)
        f2 = instance_mf1(keys, np.asarray(eid).ravel(), keys, gid.ravel())
    return FrameMetrics(int(gt.step), a, p, r, f, d, int(flag), m3, f3, m2, f2, sr,
                        int(occ.sum()), int(spec.sum()), len(gt.voxels))


class MetricsAccumulator:
    """Streaming NaN-skipping mean of frame metrics."""

    def __init__(self):
        self.sums = {k: 0.0 for k in METRIC_FIELDS if k != "step"}
        self.counts = {k: 0 for k in self.sums}
        self.frames = 0

    def add(self, m: FrameMetrics) -> None:
        self.frames += 1
        for k in self.sums:
            v = float(getattr(m, k))
            if not math.isnan(v):
                self.sums[k] += v
                self.counts[k] += 1

    def mean(self) -> dict[str, float]:
        return {k: (self.sums[k] / self.counts[k] if self.counts[k] else math.nan) for k in self.sums}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_metrics_csv(path, rows: list[FrameMetrics], aggregate: dict[str, float] | None = None) -> None:
    """Per-frame rows with header ``METRIC_FIELDS``, then an ``aggregate`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(v) for v in asdict(r).values()])
        if aggregate is not None:
            w.writerow(["aggregate"] + [_fmt(aggregate[k]) for k in METRIC_FIELDS[1:]])


def read_metrics_csv(path) -> tuple[list[dict], dict | None]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    agg = None
    if rows and rows[-1]["step"] == "aggregate":
        agg = rows.pop()
    return rows, agg
