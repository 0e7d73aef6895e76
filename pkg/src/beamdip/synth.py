"""Synthetic ground-truth beams, noise models and noise-distribution fitting."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import _rng
from .exceptions import BadParams, DegenerateSamples, NeedsShift, TooSmall
from .image_io import ScanImage

NOISE_MODELS = ("gaussian-additive", "uniform-additive", "salt-pepper", "speckle", "poisson")
FIT_FAMILIES = ("gaussian", "uniform", "exponential", "gamma", "poisson")
GOF_BINS = 32


@dataclass(frozen=True)
class BeamSpec:
    """Core + halo phase-space beam on a calibrated grid.

    The halo is a second bi-Gaussian sharing the core's Twiss ellipse with
    every sigma multiplied by ``halo_sigma_scale``.
    """

    emittance: float = 1.0
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = None
    peak_intensity: float = 1.0
    halo_amplitude_ratio: float = 0.0
    halo_sigma_scale: float = 1.0
    rows: int = 128
    cols: int = 128
    x_origin: float = None
    x_step: float = None
    xp_origin: float = None
    xp_step: float = None
    center: tuple = (0.0, 0.0)
    extent: float = 6.0

    def __post_init__(self):
        if self.gamma is None:
            object.__setattr__(self, "gamma", (1.0 + self.alpha**2) / self.beta)
        if not self.emittance > 0:
            raise BadParams(f"emittance must be positive, got {self.emittance}")
        if not (self.beta > 0 and self.gamma > 0):
            raise BadParams("beta and gamma must be positive")
        if abs(self.beta * self.gamma - self.alpha**2 - 1.0) > 1e-9:
            raise BadParams("Twiss parameters violate beta*gamma - alpha^2 = 1")
        if not 0.0 <= self.halo_amplitude_ratio <= 1.0:
            raise BadParams("halo_amplitude_ratio must lie in [0, 1]")
        if self.halo_sigma_scale < 1.0:
            raise BadParams("halo_sigma_scale must be >= 1")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        # default grid: +-extent core sigmas around the centre, cell-centred
        sx, sxp = self.sigma_x, self.sigma_xp
        if self.x_step is None:
            object.__setattr__(self, "x_step", 2 * self.extent * sx / self.cols)
        if self.xp_step is None:
            object.__setattr__(self, "xp_step", 2 * self.extent * sxp / self.rows)
        if self.x_origin is None:
            object.__setattr__(self, "x_origin", self.center[0] - self.extent * sx + self.x_step / 2)
        if self.xp_origin is None:
            object.__setattr__(self, "xp_origin", self.center[1] - self.extent * sxp + self.xp_step / 2)

    @property
    def sigma_x(self):
        return math.sqrt(self.beta * self.emittance)

    @property
    def sigma_xp(self):
        return math.sqrt(self.gamma * self.emittance)

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        return d


@dataclass(frozen=True)
class GroundTruth:
    clean: ScanImage
    spec: BeamSpec

    def radial_profile(self, r):
        """Closed-form intensity at normalized radius ``r`` (core sigma units)."""
        r = np.asarray(r, dtype=np.float64)
        s = self.spec
        return s.peak_intensity * (
            np.exp(-(r**2) / 2) + s.halo_amplitude_ratio * np.exp(-(r**2) / (2 * s.halo_sigma_scale**2))
        )

    @property
    def emittance_rms(self):
        """RMS emittance of the untruncated core + halo mixture."""
        s = self.spec
        h, k = s.halo_amplitude_ratio, s.halo_sigma_scale**2
        return s.emittance * (1 + h * k * k) / (1 + h * k)

    def normalized_radius(self, x, xp):
        s = self.spec
        dx, dxp = x - s.center[0], xp - s.center[1]
        q = s.gamma * dx**2 + 2 * s.alpha * dx * dxp + s.beta * dxp**2
        return np.sqrt(q / s.emittance)


def generate_beam(spec):
    """Evaluate the core + halo density at pixel centres; returns ``(clean, truth)``."""
    if spec.rows < 16 or spec.cols < 16:
        raise TooSmall(f"synthetic grid must be at least 16x16, got {spec.rows}x{spec.cols}")
    x = spec.x_origin + np.arange(spec.cols) * spec.x_step - spec.center[0]
    xp = spec.xp_origin + np.arange(spec.rows) * spec.xp_step - spec.center[1]
    X, XP = np.meshgrid(x, xp)
    q = (spec.gamma * X**2 + 2 * spec.alpha * X * XP + spec.beta * XP**2) / (2 * spec.emittance)
    density = np.exp(-q)
    if spec.halo_amplitude_ratio > 0:
        density = density + spec.halo_amplitude_ratio * np.exp(-q / spec.halo_sigma_scale**2)
    clean = ScanImage(
        spec.peak_intensity * density,
        x_origin=spec.x_origin,
        x_step=spec.x_step,
        xp_origin=spec.xp_origin,
        xp_step=spec.xp_step,
        source_id="synthetic",
    )
    return clean, GroundTruth(clean, spec)


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption model.

    ``params`` keys per model: gaussian-additive ``mean``, ``std``;
    uniform-additive ``a`` (half-width); salt-pepper ``p``; speckle ``std``;
    poisson ``scale``.
    """

    model: str = "gaussian-additive"
    params: dict = field(default_factory=lambda: {"std": 0.05})
    seed: int = 0

    def __post_init__(self):
        p = self.params
        if self.model not in NOISE_MODELS:
            raise BadParams(f"unknown noise model {self.model!r}")
        if self.model in ("gaussian-additive", "speckle") and p.get("std", 0.0) < 0:
            raise BadParams("std must be >= 0")
        if self.model == "uniform-additive" and p.get("a", 0.0) < 0:
            raise BadParams("uniform half-width must be >= 0")
        if self.model == "salt-pepper" and not 0.0 <= p.get("p", 0.0) <= 1.0:
            raise BadParams("salt-pepper fraction must lie in [0, 1]")
        if self.model == "poisson" and not p.get("scale", 1.0) > 0:
            raise BadParams("poisson scale must be positive")

    def to_dict(self):
        return dict(model=self.model, params=dict(self.params), seed=self.seed)


def add_noise(img, noise):
    rng = _rng.stream(noise.seed, _rng.NOISE)
    I = img.intensities
    p = noise.params
    if noise.model == "gaussian-additive":
        out = I + (p.get("mean", 0.0) + p.get("std", 0.0) * rng.standard_normal(I.shape))
    elif noise.model == "uniform-additive":
        a = p.get("a", 0.0)
        out = I + rng.uniform(-a, a, I.shape)
    elif noise.model == "salt-pepper":
        hit = rng.random(I.shape) < p.get("p", 0.0)
        salt = rng.random(I.shape) < 0.5
        out = np.where(hit, np.where(salt, I.max(), I.min()), I)
    elif noise.model == "speckle":
        out = I * (1.0 + p.get("std", 0.0) * rng.standard_normal(I.shape))
    else:
        if I.min() < 0:
            raise BadParams("poisson noise needs nonnegative intensities")
        scale = p.get("scale", 1.0)
        out = rng.poisson(I / scale) * scale
    return img.with_intensities(out)


def _frozen(family, params):
    if family == "gaussian":
        return stats.norm(params["mean"], params["std"])
    if family == "uniform":
        return stats.uniform(params["low"], params["high"] - params["low"])
    if family == "exponential":
        return stats.expon(scale=params["scale"])
    if family == "gamma":
        return stats.gamma(params["shape"], scale=params["scale"])
    return stats.poisson(params["lam"])


def fit_noise_distribution(samples, family):
    """Moment-matched fit plus a chi-square statistic over 32 equal-probability bins."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if family not in FIT_FAMILIES:
        raise BadParams(f"unknown family {family!r}")
    if x.size < 30:
        raise BadParams(f"need at least 30 samples, got {x.size}")
    mean, var = float(x.mean()), float(x.var())
    if var == 0:
        raise DegenerateSamples("samples have zero variance")
    if family in ("exponential", "gamma", "poisson") and x.min() < 0:
        raise NeedsShift(f"{family} needs nonnegative samples; shift them first")

    sd = math.sqrt(var)
    if family == "gaussian":
        params = {"mean": mean, "std": sd}
    elif family == "uniform":
        params = {"low": mean - math.sqrt(3) * sd, "high": mean + math.sqrt(3) * sd}
    elif family == "exponential":
        params = {"scale": mean}
    elif family == "gamma":
        params = {"shape": mean * mean / var, "scale": var / mean}
    else:
        params = {"lam": mean}
    return params, _chi_square(x, _frozen(family, params), discrete=family == "poisson")


def _chi_square(x, dist, discrete):
    n = x.size
    q = np.linspace(0, 1, GOF_BINS + 1)[1:-1]
    if not discrete:
        edges = dist.ppf(q)
        observed = np.bincount(np.searchsorted(edges, x, side="right"), minlength=GOF_BINS)
        expected = np.full(GOF_BINS, n / GOF_BINS)
    else:
        # integer support: bins (e_i, e_{i+1}] on merged quantile edges
        edges = np.unique(dist.ppf(q))
        cdf = np.concatenate([[0.0], dist.cdf(edges), [1.0]])
        expected = n * np.diff(cdf)
        observed = np.bincount(np.searchsorted(edges, x, side="left"), minlength=edges.size + 1)
    keep = expected > 0
    chi = ((observed[keep] - expected[keep]) ** 2 / expected[keep]).sum()
    # samples in zero-probability bins make the fit impossible
    return float(chi if observed[~keep].sum() == 0 else math.inf)
