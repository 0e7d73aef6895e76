"""Composite training loss and image-quality metrics.

The loss mixes a weighted MSE, an MAE, a total-variation penalty on the
output and an L1 gradient-difference term. Every component is averaged over
the included pixels (MSE, MAE) or included neighbour pairs (TV, GDL), so
the mixing weights do not depend on image size.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import image_array, same_shape
from .autodiff import Tensor, as_tensor
from .exceptions import BadParams, EmptyMask, ShapeError
from .image_io import to_uint8

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_mae: float = 0.5
    w_tv: float = 0.05
    w_gd: float = 0.1

    def __post_init__(self):
        w = (self.w_mse, self.w_mae, self.w_tv, self.w_gd)
        if min(w) < 0 or max(w) <= 0:
            raise BadParams(f"loss weights must be nonnegative with at least one positive: {w}")


@dataclass(frozen=True)
class LossBreakdown:
    mse: Tensor
    mae: Tensor
    tv: Tensor
    gdl: Tensor
    total: Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("mse", "mae", "tv", "gdl", "total")}


def weight_map(target, floor=0.1):
    """Per-pixel weights ``floor + (1 - floor) * v`` for normalized values v."""
    if not 0.0 <= floor < 1.0:
        raise BadParams(f"floor must lie in [0, 1), got {floor}")
    return floor + (1.0 - floor) * image_array(target)


def _as_hw(x):
    x = as_tensor(x)
    if x.data.ndim == 2:
        return x, False
    if x.data.ndim == 3 and x.shape[0] == 1:
        return x[0], True
    raise ShapeError(f"expected an (H, W) or (1, H, W) image, got {x.shape}")


def composite_loss(out, target, weights=None, mask=None, lw=LossWeights()):
    """Differentiable loss of ``out`` against ``target`` restricted to ``mask``.

    ``out`` is a Tensor (or array) of shape (H, W) or (1, H, W); ``target``,
    ``weights`` and ``mask`` are plain (H, W) arrays. TV and GDL only count
    pairs whose two pixels are both in the mask.
    """
    out, _ = _as_hw(out)
    t = image_array(target)
    same_shape(out.data, t)
    H, W = t.shape
    m = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    same_shape(m, t, "mask and image")
    n = int(m.sum())
    if n == 0:
        raise EmptyMask("loss mask selects no pixels")
    w = np.ones((H, W)) if weights is None else np.asarray(weights, dtype=np.float64)
    mf = m.astype(np.float64)

    diff = out - t
    mse = (diff.square() * (w * mf)).sum() * (1.0 / n)
    mae = (diff.abs() * mf).sum() * (1.0 / n)

    mv = mf[1:, :] * mf[:-1, :]
    mh = mf[:, 1:] * mf[:, :-1]
    pairs = float(mv.sum() + mh.sum())
    dv = out[1:, :] - out[:-1, :]
    dh = out[:, 1:] - out[:, :-1]
    if pairs > 0:
        tv = ((dv.abs() * mv).sum() + (dh.abs() * mh).sum()) * (1.0 / pairs)
        tdv, tdh = t[1:, :] - t[:-1, :], t[:, 1:] - t[:, :-1]
        gdl = (((dv - tdv).abs() * mv).sum() + ((dh - tdh).abs() * mh).sum()) * (1.0 / pairs)
    else:
        tv = gdl = (dv.abs() * 0.0).sum()
    total = mse * lw.w_mse + mae * lw.w_mae + tv * lw.w_tv + gdl * lw.w_gd
    return LossBreakdown(mse, mae, tv, gdl, total)


# no-reference metrics -----------------------------------------------------------


def shannon_entropy(img):
    """Entropy (bits) of the 256-bin histogram of the byte-quantized image."""
    counts = np.bincount(to_uint8(np.clip(image_array(img), 0.0, 1.0)).ravel(), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def laplacian_variance(img):
    return float(ndimage.correlate(image_array(img), LAPLACIAN, mode="mirror").var())


def tenengrad(img):
    I = image_array(img)
    gx = ndimage.correlate(I, SOBEL_X, mode="mirror")
    gy = ndimage.correlate(I, SOBEL_Y, mode="mirror")
    return float((gx * gx + gy * gy).sum())


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs give ``inf``."""
    a, b = image_array(a), image_array(b)
    same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
