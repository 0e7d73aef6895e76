"""Intensity-weighted phase-space moments, RMS emittance and Twiss parameters."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import image_array
from .exceptions import BadParams, DegenerateEmittance, EmptyBeam


@dataclass(frozen=True)
class PhaseSpaceStats:
    mean_x: float
    mean_xp: float
    var_x: float
    var_xp: float
    cov_xxp: float
    sigma_x: float
    sigma_xp: float
    emittance_rms: float
    total_intensity: float

    @classmethod
    def from_twiss(cls, twiss, emittance, center=(0.0, 0.0), total_intensity=float("nan")):
        """Second moments of the ellipse described by ``twiss`` and ``emittance``."""
        vx, vxp, cov = twiss.beta * emittance, twiss.gamma * emittance, -twiss.alpha * emittance
        return cls(center[0], center[1], vx, vxp, cov, math.sqrt(vx), math.sqrt(vxp), emittance, total_intensity)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TwissTriple:
    alpha: float
    beta: float
    gamma: float


def _axes(img):
    cal = img.calibration() if hasattr(img, "calibration") and callable(img.calibration) else getattr(img, "calibration", None)
    if cal is None:
        cal = dict(x_origin=0.0, x_step=1.0, xp_origin=0.0, xp_step=1.0)
    I = image_array(img)
    x = cal["x_origin"] + np.arange(I.shape[1]) * cal["x_step"]
    xp = cal["xp_origin"] + np.arange(I.shape[0]) * cal["xp_step"]
    return I, x, xp


def compute_stats(img, mask=None):
    """Weighted moments over the included pixels at their cell-centre coordinates.

    ``img`` is a ScanImage (or anything with ``intensities`` and a
    calibration); ``mask`` is an optional boolean grid of included pixels.
    """
    I, x, xp = _axes(img)
    if mask is not None:
        I = np.where(np.asarray(mask, dtype=bool), I, 0.0)
    total = float(I.sum())
    if not total > 0:
        raise EmptyBeam("included pixels carry no positive intensity")
    col_w = I.sum(axis=0)
    row_w = I.sum(axis=1)
    mx = float(col_w @ x) / total
    mxp = float(row_w @ xp) / total
    dx, dxp = x - mx, xp - mxp
    vx = float(col_w @ (dx * dx)) / total
    vxp = float(row_w @ (dxp * dxp)) / total
    cov = float(dxp @ I @ dx) / total
    det = vx * vxp - cov * cov
    eps = math.sqrt(det) if det > 0 else 0.0
    return PhaseSpaceStats(mx, mxp, vx, vxp, cov, math.sqrt(vx), math.sqrt(vxp), eps, total)


def twiss(stats):
    eps = stats.emittance_rms
    if not eps > 0:
        raise DegenerateEmittance("Twiss parameters need a positive emittance")
    return TwissTriple(-stats.cov_xxp / eps, stats.var_x / eps, stats.var_xp / eps)


def ellipse_area(emittance, n_sigma=1.0):
    """Area pi * N^2 * emittance of the N-sigma phase-space ellipse."""
    if emittance < 0 or not n_sigma > 0:
        raise BadParams("emittance must be >= 0 and n_sigma > 0")
    return n_sigma * n_sigma * (math.pi * emittance)


def nsigma_contour(tw, emittance, n_sigma=1.0, points=256, center=(0.0, 0.0)):
    """Vertices ``(x, x')`` of the N-sigma ellipse, shape ``(points, 2)``."""
    if points < 8:
        raise BadParams("contour needs at least 8 points")
    if not (emittance > 0 and tw.beta > 0 and tw.gamma > 0):
        raise DegenerateEmittance("contour needs positive emittance and beta, gamma")
    t = np.linspace(0.0, 2 * np.pi, points, endpoint=False)
    a = n_sigma * math.sqrt(emittance)
    sb = math.sqrt(tw.beta)
    x = a * sb * np.cos(t)
    xp = -a * (tw.alpha * np.cos(t) + np.sin(t)) / sb
    return np.column_stack([x + center[0], xp + center[1]])


@dataclass(frozen=True)
class RadialProfile:
    edges: np.ndarray
    mean_r: np.ndarray
    mean_intensity: np.ndarray
    counts: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def normalized_radius(img, stats, tw=None):
    """Per-pixel r = sqrt((gamma dx^2 + 2 alpha dx dx' + beta dx'^2) / emittance)."""
    if tw is None:
        tw = twiss(stats)
    eps = stats.emittance_rms
    if not eps > 0:
        raise DegenerateEmittance("radial profile needs a positive emittance")
    _, x, xp = _axes(img)
    dx = x[None, :] - stats.mean_x
    dxp = xp[:, None] - stats.mean_xp
    q = tw.gamma * dx * dx + 2 * tw.alpha * dx * dxp + tw.beta * dxp * dxp
    return np.sqrt(np.clip(q, 0.0, None) / eps)


def radial_profile(img, stats, tw=None, bins=50, r_max=7.0):
    """Mean intensity in rings of normalized radius; empty rings are NaN."""
    if bins < 4:
        raise BadParams("need at least 4 bins")
    r = normalized_radius(img, stats, tw)
    I = image_array(img)
    edges = np.linspace(0.0, r_max, bins + 1)
    idx = np.digitize(r.ravel(), edges) - 1
    ok = (idx >= 0) & (idx < bins)
    counts = np.bincount(idx[ok], minlength=bins)
    sum_i = np.bincount(idx[ok], weights=I.ravel()[ok], minlength=bins)
    sum_r = np.bincount(idx[ok], weights=r.ravel()[ok], minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_i = np.where(counts > 0, sum_i / counts, np.nan)
        mean_r = np.where(counts > 0, sum_r / counts, np.nan)
    return RadialProfile(edges, mean_r, mean_i, counts)


def beam_area_metric(img, area_threshold_fraction=0.01):
    """pi * emittance of the pixels at or above a fraction of the peak; 0 if none."""
    I = image_array(img)
    peak = float(I.max())
    if not peak > 0:
        return 0.0
    try:
        st = compute_stats(img, mask=I >= area_threshold_fraction * peak)
    except EmptyBeam:
        return 0.0
    return math.pi * st.emittance_rms
