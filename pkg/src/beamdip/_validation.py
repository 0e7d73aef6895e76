"""Input validation helpers shared by functions and estimators."""

import numbers

import numpy as np

from .exceptions import BadParams, ShapeError


def image_array(X, *, copy=False):
    """Return the 2D float64 intensity grid behind ``X``.

    Accepts a ``ScanImage``, a ``NormalizedImage``, a ``(1, H, W)`` tensor-like
    array or a plain 2D array.
    """
    if hasattr(X, "intensities"):
        arr = X.intensities
    elif hasattr(X, "values") and not isinstance(X, np.ndarray):
        arr = X.values
    else:
        arr = X
    arr = np.array(arr, dtype=np.float64, copy=copy) if copy else np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise BadParams("image contains non-finite values")
    return arr


def point_array(X):
    """Validate an ``(n, d)`` point cloud with d >= 2; an empty input gives shape (0, 2)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[1] if arr.ndim == 2 else 2)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ShapeError(f"expected points of shape (n, d>=2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise BadParams("point cloud contains non-finite coordinates")
    return arr


def check_scalar(value, name, *, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(value, kind) or isinstance(value, bool):
        raise BadParams(f"{name} must be {'an integer' if integer else 'a real number'}, got {value!r}")
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise BadParams(f"{name}={value} out of range")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        raise BadParams(f"{name}={value} out of range")
    return value


def same_shape(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")
