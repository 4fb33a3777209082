"""Small input checks shared across modules."""

import numpy as np
from sklearn.utils import check_array


def check_points(points, name="points", allow_empty=False) -> np.ndarray:
    """Finite float64 array of shape (M, 3)."""
    pts = check_array(points, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1,
                      input_name=name)
    if pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (M, 3), got {pts.shape}")
    return pts


def check_depth(depth, shape=None) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    if shape is not None and depth.shape != tuple(shape):
        raise ValueError(f"depth shape {depth.shape} != expected {tuple(shape)}")
    if np.any(np.isnan(depth)) or np.any(depth < 0):
        raise ValueError("depth must be non-negative with 0 marking invalid pixels")
    return depth


def check_unit_interval(value, name):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return float(value)
