"""Frame-by-frame mapper with a scikit-learn style interface."""

from __future__ import annotations

import logging
import time
from collections import OrderedDict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import filter as phd
from .filter import FilterParams, LabeledVoxelMap, TemplateBirth
from .measurement import MeasurementFrame
from .memory import (MatchParams, TemplateLibrary, build_evidence, frame_free_test, match,
                     maybe_store_template)
from .particle_store import InstanceRegistry, ParticleGrid
from .validation import check_frame, check_points, check_rng
from .visibility import build_indices_image

log = logging.getLogger(__name__)

STAGES = ("recenter", "predict", "visibility", "update", "birth", "memory", "estimate")


class SemanticOccupancyMapper(BaseEstimator):
    """Instance-aware occupancy mapper driven by tracked, segmented depth frames.

    ``fit`` consumes a whole sequence from scratch, ``partial_fit`` one
    frame. After each frame ``map_`` holds the labeled voxel estimate and
    ``timings_`` the wall-clock seconds spent in each stage.
    """

    def __init__(self, filter_params: FilterParams | None = None, m: int = 7, l_voxel: float = 0.2,
                 origin=(0.0, 0.0, 0.0), memory: bool = True, completeness_threshold: float = 0.9,
                 n_rays: int = 1000, trigger_points: int = 5000, match_iterations: int = 200,
                 score_threshold: float = 0.6, early_exit: float = 0.9, prune_ratio: float = 0.95,
                 gc_frames: int = 10, force_resample: bool = False, visibility_sigmas: float = 3.0,
                 random_state=0):
        self.filter_params = filter_params
        self.m = m
        self.l_voxel = l_voxel
        self.origin = origin
        self.memory = memory
        self.completeness_threshold = completeness_threshold
        self.n_rays = n_rays
        self.trigger_points = trigger_points
        self.match_iterations = match_iterations
        self.score_threshold = score_threshold
        self.early_exit = early_exit
        self.prune_ratio = prune_ratio
        self.gc_frames = gc_frames
        self.force_resample = force_resample
        self.visibility_sigmas = visibility_sigmas
        self.random_state = random_state

    # -- lifecycle -------------------------------------------------------------
    def _init_state(self, first: MeasurementFrame | None = None):
        self.params_ = self.filter_params if self.filter_params is not None else FilterParams()
        if not isinstance(self.params_, FilterParams):
            raise TypeError("filter_params must be a FilterParams")
        sensor = None if first is None else first.pose.position
        self.grid_ = ParticleGrid(self.m, self.l_voxel, self.params_.capacity, self.origin, sensor)
        self.registry_ = InstanceRegistry()
        if not hasattr(self, "library_") or self.library_ is None:
            self.library_ = TemplateLibrary()
        self.rng_ = check_rng(self.random_state)
        self.match_params_ = MatchParams(self.match_iterations, self.early_exit, self.score_threshold)
        self.map_ = None
        self.step_ = None
        self.timings_ = OrderedDict((s, 0.0) for s in STAGES)
        self.matches_ = []
        self.stored_ = []

    def reset(self, keep_library: bool = True):
        lib = getattr(self, "library_", None) if keep_library else None
        for attr in list(vars(self)):
            if attr.endswith("_") and not attr.startswith("__"):
                delattr(self, attr)
        self.library_ = lib
        return self

    def fit(self, frames, y=None):
        """Map a whole sequence; keeps any template library already loaded."""
        self.reset(keep_library=True)
        for fr in frames:
            self.partial_fit(fr)
        if not hasattr(self, "grid_"):
            self._init_state()
        return self

    def partial_fit(self, frame: MeasurementFrame, y=None):
        """Run predict, visibility, update, birth, memory and estimation for one frame."""
        if not hasattr(self, "grid_"):
            self._init_state(frame)
        check_frame(frame, self.step_)
        k = int(frame.step)
        p = self.params_
        grid, reg, rng = self.grid_, self.registry_, self.rng_
        t = OrderedDict()
        c0 = time.perf_counter()
        grid.step = k
        grid.recenter(frame.pose.position)
        c1 = time.perf_counter()
        t["recenter"] = c1 - c0

        phd.predict(grid, reg, frame.transforms, p, k, rng)
        c2 = time.perf_counter()
        t["predict"] = c2 - c1

        image = build_indices_image(grid, frame.camera, frame.pose, frame.depth, k,
                                    slack=lambda d: self.visibility_sigmas * p.sigma(d))
        c3 = time.perf_counter()
        t["visibility"] = c3 - c2

        phd.update(grid, image, frame, p, k)
        c4 = time.perf_counter()
        t["update"] = c4 - c3

        births = self._template_births(frame) if self.memory else []
        phd.birth(grid, reg, frame, p, k, rng, births)
        if self.force_resample:
            live = grid.live()
            grid.resample_cells(np.unique(grid.code[live]), rng, k)
        c5 = time.perf_counter()
        t["birth"] = c5 - c4

        self.map_ = phd.estimate_map(grid, reg, p, k)
        c6 = time.perf_counter()
        if self.memory:
            self._store_templates(frame)
        reg.garbage_collect(grid, self.gc_frames)
        c7 = time.perf_counter()
        t["memory"] = c7 - c6
        t["estimate"] = c6 - c5
        self.last_timings_ = t
        for s, v in t.items():
            self.timings_[s] += v
        self.step_ = k
        return self

    # -- memory ------------------------------------------------------------------
    def _template_births(self, frame: MeasurementFrame) -> list[TemplateBirth]:
        out = []
        if len(self.library_) == 0:
            return out
        ids, counts = np.unique(frame.point_ids, return_counts=True)
        for iid, cnt in zip(ids.tolist(), counts.tolist()):
            lab = frame.label_of(iid)
            if lab.background or cnt <= self.trigger_points:
                continue
            if iid in self.registry_ and self.registry_.particle_count(self.grid_, iid) > 0:
                continue
            if not self.library_.templates(lab.semantic_label):
                continue
            free = frame_free_test(frame, self.grid_.l_voxel)
            pts = frame.instance_points(iid)
            ev = build_evidence(pts, self.grid_.l_voxel, self.grid_.origin, free)
            res = match(ev, pts, self.library_, lab.semantic_label, self.rng_, self.match_params_, free)
            if res is None:
                continue
            self.matches_.append((frame.step, iid, res.score))
            log.info("step %d: instance %d matched a %s template (score %.3f)",
                     frame.step, iid, lab.semantic_label, res.score)
            out.append(TemplateBirth(iid, res.template.placed(res.transform)))
        return out

    def _store_templates(self, frame: MeasurementFrame):
        for iid in np.unique(frame.point_ids).tolist():
            rec = self.registry_.records.get(iid)
            if rec is None or rec.templated or not rec.movable:
                continue
            stored, c = maybe_store_template(self.grid_, self.registry_, self.library_, iid, self.map_,
                                             self.completeness_threshold, self.n_rays, frame.step,
                                             self.prune_ratio)
            if rec.templated:
                self.stored_.append((frame.step, iid, stored, c))

    # -- queries -------------------------------------------------------------------
    def _check_fitted(self):
        if getattr(self, "map_", None) is None:
            raise NotFittedError("mapper has not processed any frame")

    def estimate_map(self) -> LabeledVoxelMap:
        self._check_fitted()
        return self.map_

    def predict(self, X) -> np.ndarray:
        """Status code per query point: 0 free, 1 occupied, 2 speculatively occupied."""
        self._check_fitted()
        X = check_points(X)
        return self.map_.status_at(self.grid_.voxel_index(X))

    def predict_instances(self, X) -> np.ndarray:
        """Instance id per query point (0 unless the voxel is occupied)."""
        self._check_fitted()
        X = check_points(X)
        return self.map_.instance_at(self.grid_.voxel_index(X))

    def particle_weights(self) -> np.ndarray:
        """Weights of live particles in pool order."""
        self._check_fitted()
        return self.grid_.weight[self.grid_.live()].copy()
