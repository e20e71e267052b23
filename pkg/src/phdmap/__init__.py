"""Instance-aware semantic occupancy mapping with an ID-augmented SMC-PHD filter."""

from __future__ import annotations

from .estimator import SemanticOccupancyMapper
from .filter import FREE, OCCUPIED, SPECULATIVE, FilterParams, LabeledVoxelMap
from .geometry import CameraModel, Pose, RigidTransform
from .measurement import InstanceLabel, MeasurementFrame
from .particle_store import InstanceRegistry, ParticleGrid

__version__ = "0.1.0"

__all__ = [
    "SemanticOccupancyMapper", "FilterParams", "LabeledVoxelMap", "FREE", "OCCUPIED", "SPECULATIVE",
    "CameraModel", "Pose", "RigidTransform", "InstanceLabel", "MeasurementFrame",
    "InstanceRegistry", "ParticleGrid",
]
