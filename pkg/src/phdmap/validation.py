"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .measurement import MeasurementFrame


def check_points(X) -> np.ndarray:
    """Finite float array of shape (N, 3)."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=0)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {X.shape}")
    return X


def check_frame(frame, last_step: int | None = None) -> MeasurementFrame:
    if not isinstance(frame, MeasurementFrame):
        raise TypeError(f"expected a MeasurementFrame, got {type(frame).__name__}")
    if frame.step < 0:
        raise ValueError("frame step must be nonnegative")
    if last_step is not None and frame.step <= last_step:
        raise ValueError(f"frame step {frame.step} does not follow step {last_step}")
    return frame


def check_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(random_state)
    raise TypeError("random_state must be None, an int or a numpy Generator")
