"""Scan image containers, grid-file I/O, value mapping and classical filters.

Grid files (``.csv`` or whitespace-separated ``.dat``) start with one header
line holding::

    rows, cols, x_origin, x_step, xp_origin, xp_step, shift_applied, source_id

followed by ``rows`` lines of ``cols`` intensities (mV). Position ``x`` runs
along columns, divergence ``x'`` along rows; origins are pixel-centre
coordinates of index 0.
"""

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import image_array
from .exceptions import (
    BadParams,
    BadSigma,
    BadWindow,
    MalformedFile,
    ParseError,
    TooSmall,
    ZeroProfile,
)

DATA_ROOT_ENV = "BEAMDIP_DATA_ROOT"


@dataclass(frozen=True, eq=False)
class ScanImage:
    """Calibrated intensity grid; ``intensities[row, col]`` in mV."""

    intensities: np.ndarray
    x_origin: float = 0.0
    x_step: float = 1.0
    xp_origin: float = 0.0
    xp_step: float = 1.0
    shift_applied: float = 0.0
    source_id: str = ""

    def __post_init__(self):
        arr = np.array(self.intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise MalformedFile(f"intensities must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise TooSmall(f"image must be at least 2x2, got {arr.shape[0]}x{arr.shape[1]}")
        if not (self.x_step > 0 and self.xp_step > 0):
            raise BadParams(f"axis steps must be positive, got {self.x_step}, {self.xp_step}")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def rows(self):
        return self.intensities.shape[0]

    @property
    def cols(self):
        return self.intensities.shape[1]

    @property
    def shape(self):
        return self.intensities.shape

    @property
    def x_coords(self):
        return self.x_origin + np.arange(self.cols) * self.x_step

    @property
    def xp_coords(self):
        return self.xp_origin + np.arange(self.rows) * self.xp_step

    def calibration(self):
        return dict(
            x_origin=self.x_origin,
            x_step=self.x_step,
            xp_origin=self.xp_origin,
            xp_step=self.xp_step,
        )

    def with_intensities(self, values, **changes):
        return replace(self, intensities=values, **changes)

    def __eq__(self, other):
        if not isinstance(other, ScanImage):
            return NotImplemented
        return (
            np.array_equal(self.intensities, other.intensities)
            and self.calibration() == other.calibration()
            and self.shift_applied == other.shift_applied
            and self.source_id == other.source_id
        )


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    """Intensities mapped to [0, 1] plus what is needed to map them back."""

    values: np.ndarray
    orig_min: float
    orig_max: float
    degenerate: bool = False
    calibration: dict = field(default_factory=lambda: dict(x_origin=0.0, x_step=1.0, xp_origin=0.0, xp_step=1.0))
    shift_applied: float = 0.0
    source_id: str = ""

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values):
        return replace(self, values=np.asarray(values, dtype=np.float64))


# file I/O ------------------------------------------------------------------------


def resolve_path(path, data_root=None):
    """Resolve relative paths against ``data_root`` or ``$BEAMDIP_DATA_ROOT``."""
    path = Path(path)
    root = data_root if data_root is not None else os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _infer_format(path, format):
    if format is not None:
        if format not in ("csv-grid", "dat-grid"):
            raise BadParams(f"unknown grid format {format!r}")
        return format
    return "dat-grid" if Path(path).suffix.lower() == ".dat" else "csv-grid"


def _split(line, fmt):
    if fmt == "csv-grid":
        return [c.strip() for c in line.split(",")]
    return line.split()


def _num(cell, lineno):
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"non-numeric cell {cell!r}", line=lineno) from None


def load_scan(path, format=None, data_root=None):
    """Read a grid file into a :class:`ScanImage`."""
    path = resolve_path(path, data_root)
    fmt = _infer_format(path, format)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MalformedFile("empty file", line=1)
    head = _split(lines[0], fmt)
    if len(head) not in (7, 8):
        raise MalformedFile(f"header needs 8 fields, found {len(head)}", line=1)
    try:
        rows, cols = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError("rows/cols must be integers", line=1) from None
    x0, dx, xp0, dxp, shift = (_num(c, 1) for c in head[2:7])
    source_id = head[7] if len(head) == 8 else ""
    if rows < 2 or cols < 2:
        raise TooSmall(f"grid must be at least 2x2, header declares {rows}x{cols}")

    body = lines[1:]
    if len(body) < rows:
        raise MalformedFile(f"expected {rows} data rows, found {len(body)}", line=len(lines) + 1)
    if any(line.strip() for line in body[rows:]):
        raise MalformedFile(f"unexpected data after {rows} rows", line=rows + 2)
    grid = np.empty((rows, cols))
    for r in range(rows):
        lineno = r + 2
        cells = _split(body[r], fmt)
        if len(cells) != cols:
            raise MalformedFile(f"expected {cols} cells, found {len(cells)}", line=lineno)
        for c, cell in enumerate(cells):
            grid[r, c] = _num(cell, lineno)
    return ScanImage(grid, x0, dx, xp0, dxp, shift, source_id)


def save_scan(img, path, format=None):
    fmt = _infer_format(path, format)
    sep = "," if fmt == "csv-grid" else " "
    sid = img.source_id
    if any(ch in sid for ch in ", \t\n"):
        raise BadParams(f"source_id {sid!r} may not contain separators")
    head = [img.rows, img.cols, img.x_origin, img.x_step, img.xp_origin, img.xp_step, img.shift_applied]
    lines = [sep.join([str(head[0]), str(head[1])] + [repr(float(v)) for v in head[2:]] + [sid])]
    for row in img.intensities:
        lines.append(sep.join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pgm(path, img):
    """Write an 8-bit binary portable graymap of a normalized image (or [0, 1] array)."""
    data = to_uint8(img)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise MalformedFile("not a binary PGM", line=1)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise MalformedFile("only 8-bit graymaps are supported", line=1)
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# value mapping ---------------------------------------------------------------------


def shift_nonnegative(img):
    """Translate intensities so the minimum is zero when it was negative.

    The offset is accumulated into ``shift_applied`` so :func:`unshift` can
    restore the original level.
    """
    lo = float(img.intensities.min())
    if lo >= 0:
        return img
    return img.with_intensities(img.intensities - lo, shift_applied=img.shift_applied - lo)


def unshift(img):
    if img.shift_applied == 0:
        return img
    return img.with_intensities(img.intensities - img.shift_applied, shift_applied=0.0)


def normalize(img):
    v = img.intensities
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        values, degenerate = np.zeros_like(v), True
    else:
        values, degenerate = (v - lo) / (hi - lo), False
    return NormalizedImage(
        values=values,
        orig_min=lo,
        orig_max=hi,
        degenerate=degenerate,
        calibration=img.calibration(),
        shift_applied=img.shift_applied,
        source_id=img.source_id,
    )


def denormalize(norm, values=None):
    """Map normalized values (``norm.values`` by default) back to a :class:`ScanImage`."""
    v = norm.values if values is None else np.asarray(values, dtype=np.float64)
    return ScanImage(
        v * (norm.orig_max - norm.orig_min) + norm.orig_min,
        shift_applied=norm.shift_applied,
        source_id=norm.source_id,
        **norm.calibration,
    )


def to_uint8(img):
    """Quantize [0, 1] values to bytes with round-half-away-from-zero."""
    v = image_array(img) * 255.0
    b = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(b, 0, 255).astype(np.uint8)


def extract_profile(img, axis="position", normalize=False):
    """Marginal intensity along ``position`` (sum over angle rows) or ``angle``."""
    I = image_array(img)
    if axis == "position":
        prof = I.sum(axis=0)
    elif axis == "angle":
        prof = I.sum(axis=1)
    else:
        raise BadParams(f"axis must be 'position' or 'angle', got {axis!r}")
    if normalize:
        peak = prof.max()
        if peak == 0:
            raise ZeroProfile("cannot normalize a profile whose peak is zero")
        prof = prof / peak
    return prof


# classical filters -----------------------------------------------------------------


def _like(img, values):
    return img.with_intensities(values) if isinstance(img, ScanImage) else values


def median_filter(img, k=3):
    if not isinstance(k, (int, np.integer)) or k < 3 or k % 2 == 0:
        raise BadWindow(f"window must be an odd integer >= 3, got {k!r}")
    return _like(img, ndimage.median_filter(image_array(img), size=int(k), mode="mirror"))


def gaussian_kernel(sigma):
    if not sigma > 0:
        raise BadSigma(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3 * sigma)
    t = np.arange(-radius, radius + 1)
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_filter(img, sigma=1.0):
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(image_array(img), k, axis=0, mode="mirror")
    out = ndimage.correlate1d(out, k, axis=1, mode="mirror")
    return _like(img, out)


def threshold_denoise(img, t):
    I = image_array(img)
    return _like(img, np.where(I < t, 0.0, I))


def border_background(img, width=8):
    """Median of the ``width``-pixel frame around the grid, taken as the pedestal."""
    I = image_array(img)
    w = int(width)
    if w < 1 or 2 * w >= min(I.shape):
        raise BadParams(f"border width {width} does not fit a {I.shape[0]}x{I.shape[1]} grid")
    frame = np.ones(I.shape, dtype=bool)
    frame[w:-w, w:-w] = False
    return float(np.median(I[frame]))


def subtract_background(img, width=8):
    return _like(img, image_array(img) - border_background(img, width))


# triage ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TriagePolicy:
    min_peak_to_median: float = 5.0
    max_centroid_offset: float = 0.25
    min_occupied: int = 50
    occupied_fraction: float = 0.01


@dataclass(frozen=True)
class TriageDecision:
    accept: bool
    reason: str = ""
    peak_to_median: float = float("nan")
    centroid_offset: float = float("nan")
    occupied: int = 0


def triage(img, policy=TriagePolicy()):
    """Sort an image into accept / reject(no-beam | too-small | off-center)."""
    I = image_array(img)
    I = I - min(0.0, float(I.min()))
    peak, med = float(I.max()), float(np.median(I))
    ratio = peak / med if med > 0 else (math.inf if peak > 0 else 0.0)
    if ratio < policy.min_peak_to_median:
        return TriageDecision(False, "no-beam", ratio)

    signal = np.clip(I - med, 0.0, None)
    occupied = signal >= policy.occupied_fraction * signal.max()
    n_occ = int(occupied.sum())
    if n_occ < policy.min_occupied:
        return TriageDecision(False, "too-small", ratio, occupied=n_occ)

    w = np.where(occupied, signal, 0.0)
    rows, cols = np.indices(I.shape)
    cr, cc = (w * rows).sum() / w.sum(), (w * cols).sum() / w.sum()
    half_r, half_c = (I.shape[0] - 1) / 2, (I.shape[1] - 1) / 2
    offset = max(abs(cr - half_r) / half_r, abs(cc - half_c) / half_c)
    if offset > policy.max_centroid_offset:
        return TriageDecision(False, "off-center", ratio, offset, n_occ)
    return TriageDecision(True, "", ratio, offset, n_occ)


# estimator wrappers --------------------------------------------------------------------


class MedianFilter(TransformerMixin, BaseEstimator):
    """k x k median filter with reflected borders."""

    def __init__(self, k=3):
        self.k = k

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return median_filter(X, self.k)


class GaussianFilter(TransformerMixin, BaseEstimator):
    def __init__(self, sigma=1.0):
        self.sigma = sigma

    def fit(self, X, y=None):
        gaussian_kernel(self.sigma)
        return self

    def transform(self, X):
        return gaussian_filter(X, self.sigma)


class ThresholdDenoiser(TransformerMixin, BaseEstimator):
    def __init__(self, threshold=0.0):
        self.threshold = threshold

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return threshold_denoise(X, self.threshold)
