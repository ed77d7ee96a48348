"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import ShapeError


def check_rasters(X, channels=None, resolution=None, dtype=np.float32, name="X") -> np.ndarray:
    """Validate a (N, C, H, W) raster stack; (N, H, W) is read as one channel."""
    X = check_array(np.asarray(X), allow_nd=True, ensure_2d=False, dtype=dtype, ensure_all_finite=True,
                    input_name=name)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"{name} must be (N, C, H, W) or (N, H, W), got shape {X.shape}")
    if channels is not None and X.shape[1] not in np.atleast_1d(channels):
        raise ShapeError(f"{name} has {X.shape[1]} channels, expected {channels}")
    if X.shape[2] != X.shape[3]:
        raise ShapeError(f"{name} rasters must be square, got {X.shape[2]}x{X.shape[3]}")
    if resolution is not None and X.shape[2] != resolution:
        raise ShapeError(f"{name} resolution {X.shape[2]} does not match fitted resolution {resolution}")
    return X


def check_vectors(V, dim=None, name="Z") -> np.ndarray:
    """Validate an (N, D) float64 array."""
    V = check_array(np.atleast_2d(np.asarray(V, dtype=np.float64)), ensure_all_finite=True, input_name=name)
    if dim is not None and V.shape[1] != dim:
        raise ShapeError(f"{name} has width {V.shape[1]}, expected {dim}")
    return V


def check_unit_interval(x, name="x"):
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"{name} must lie in [0, 1], got range [{x.min()}, {x.max()}]")
    return x
