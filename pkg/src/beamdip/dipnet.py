"""Skip encoder-decoder network and the per-image training loop."""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _rng
from .autodiff import Adam, Tensor, channel_norm, concat_channels, conv2d, leaky_relu, no_grad, upsample_bilinear2x
from .emittance import beam_area_metric
from .exceptions import BadFraction, BadK, BadParams, DegenerateInput, DivergedTraining
from .image_io import NormalizedImage, ScanImage, denormalize, normalize, shift_nonnegative, unshift
from .losses import LossWeights, composite_loss, laplacian_variance, psnr, shannon_entropy, tenengrad, weight_map
from .stopping import ESConfig, StopState, VarianceTracker, hybrid_decision, make_kfold_masks, make_random_mask, patience_step, pseudo_val_loss

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    scales: int = 2
    down_filters: int = 32
    up_filters: int = 32
    skip_filters: int = 2
    in_channels: int = 1
    out_channels: int = 1
    activation_slope: float = 0.01
    seed: int = 0
    init: str = "uniform"
    channel_norm: bool = True

    def __post_init__(self):
        if self.init not in ("uniform", "kaiming"):
            raise BadParams(f"init must be 'uniform' or 'kaiming', got {self.init!r}")
        counts = (self.down_filters, self.up_filters, self.skip_filters, self.in_channels, self.out_channels)
        if min(counts) < 1 or self.scales < 1:
            raise BadParams(f"filter counts and scales must be >= 1: {self}")


class _Conv:
    __slots__ = ("name", "weight", "bias", "stride", "act", "gamma", "beta")

    def __init__(self, name, cin, cout, k, stride, act, rng, init="uniform", slope=0.01, norm=False):
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.name = name
        if init == "kaiming":
            gain = np.sqrt(2.0 / (1.0 + slope * slope)) if act else 1.0
            w = rng.standard_normal((cout, cin, k, k)) * (gain / np.sqrt(fan_in))
            b = np.zeros(cout)
        else:
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            b = rng.uniform(-bound, bound, size=cout)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.stride = stride
        self.act = act
        self.gamma = Tensor(np.ones(cout), requires_grad=True) if norm else None
        self.beta = Tensor(np.zeros(cout), requires_grad=True) if norm else None

    def params(self):
        out = [self.weight, self.bias]
        return out if self.gamma is None else out + [self.gamma, self.beta]

    def __call__(self, x, slope):
        y = conv2d(x, self.weight, self.bias, stride=self.stride)
        if self.gamma is not None:
            y = channel_norm(y, self.gamma, self.beta)
        return leaky_relu(y, slope) if self.act else y


class SkipNet:
    """Hourglass network with 1x1 skip branches at every scale.

    For ``scales=2`` the layer list is::

        enc1  conv3x3/2 (in->d) act, conv3x3 (d->d) act    skip1 conv1x1 (d->s)
        enc2  conv3x3/2 (d->d)  act, conv3x3 (d->d) act    skip2 conv1x1 (d->s)
        dec2  conv3x3 (s->u) act on skip2, upsample x2
        dec1  conv3x3 (s+u->u) act on concat(skip1, dec2), upsample x2
        head  conv1x1 (u->out), no activation

    With ``channel_norm`` every conv except the head is followed by a
    per-channel normalization (before the activation), as in the usual
    deep-image-prior skip network; without it the optimizer sits on a
    constant-output plateau for the first hundred or so iterations.

    Inputs whose sides are not multiples of ``2**scales`` are reflect-padded
    before the forward pass and the output is cropped back.
    """

    def __init__(self, cfg=NetConfig()):
        self.cfg = cfg
        rng = _rng.stream(cfg.seed, _rng.PARAMS)
        d, u, s = cfg.down_filters, cfg.up_filters, cfg.skip_filters
        norm = cfg.channel_norm
        self.encoders, self.skips, self.decoders = [], [], []
        cin = cfg.in_channels
        for i in range(1, cfg.scales + 1):
            self.encoders.append(
                (
                    _Conv(f"enc{i}a", cin, d, 3, 2, True, rng, cfg.init, cfg.activation_slope, norm),
                    _Conv(f"enc{i}b", d, d, 3, 1, True, rng, cfg.init, cfg.activation_slope, norm),
                )
            )
            self.skips.append(_Conv(f"skip{i}", d, s, 1, 1, False, rng, cfg.init, cfg.activation_slope, norm))
            cin = d
        for i in range(1, cfg.scales + 1):
            width = s if i == cfg.scales else s + u
            self.decoders.append(_Conv(f"dec{i}", width, u, 3, 1, True, rng, cfg.init, cfg.activation_slope, norm))
        self.head = _Conv("head", u, cfg.out_channels, 1, 1, False, rng, cfg.init, cfg.activation_slope)

    @property
    def layers(self):
        for a, b in self.encoders:
            yield a
            yield b
        yield from self.skips
        yield from self.decoders
        yield self.head

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        _, H, W = z.shape
        f = 2**self.cfg.scales
        ph, pw = (-H) % f, (-W) % f
        top, left = ph // 2, pw // 2
        if ph or pw:
            z = np.pad(z, ((0, 0), (top, ph - top), (left, pw - left)), mode="reflect")
        slope = self.cfg.activation_slope
        x = Tensor(z)
        skips = []
        for (a, b), sk in zip(self.encoders, self.skips):
            x = b(a(x, slope), slope)
            skips.append(sk(x, slope))
        y = None
        for i in reversed(range(self.cfg.scales)):
            inp = skips[i] if y is None else concat_channels(skips[i], y)
            y = upsample_bilinear2x(self.decoders[i](inp, slope))
        out = self.head(y, slope)
        if ph or pw:
            out = out[:, top : top + H, left : left + W]
        return out


def build_skip_net(cfg=NetConfig()):
    return SkipNet(cfg)


def sample_input_z(rows, cols, seed):
    """Single-channel N(0, 1) input field of shape ``(1, rows, cols)``."""
    return _rng.stream(seed, _rng.INPUT_Z).standard_normal((1, rows, cols))


def perturb_input(z_base, reg_noise_std, seed, iteration):
    """Return ``z_base + reg_noise_std * N(0, 1)`` from the stream keyed by (seed, iteration)."""
    if reg_noise_std < 0:
        raise BadParams(f"reg_noise_std must be >= 0, got {reg_noise_std}")
    if reg_noise_std == 0:
        return np.array(z_base, dtype=np.float64, copy=True)
    noise = _rng.stream(seed, _rng.PERTURB, iteration).standard_normal(np.shape(z_base))
    return z_base + reg_noise_std * noise


# training -------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 2000
    lr: float = 0.01
    reg_noise_std: float = 0.03
    loss_weights: LossWeights = LossWeights()
    weight_floor: float = 0.1
    mask_mode: str = "random"
    mask_fraction: float = 0.05
    kfold_k: int = 8
    es: ESConfig = ESConfig()
    metric_interval: int = 10
    seed: int = 0
    net: NetConfig = NetConfig()
    area_threshold_fraction: float = 0.01
    snapshot_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.metric_interval < 1:
            raise BadParams("max_iters and metric_interval must be >= 1")
        if not 0.0 < self.mask_fraction < 0.5:
            raise BadFraction(f"mask_fraction must lie in (0, 0.5), got {self.mask_fraction}")
        if self.mask_mode not in ("random", "kfold"):
            raise BadParams(f"mask_mode must be 'random' or 'kfold', got {self.mask_mode!r}")
        if self.kfold_k < 2:
            raise BadK(f"kfold_k must be >= 2, got {self.kfold_k}")
        if self.lr < 0 or self.reg_noise_std < 0 or self.snapshot_every < 0:
            raise BadParams("lr, reg_noise_std and snapshot_every must be >= 0")


LOG_COLUMNS = (
    "schema_version",
    "iteration",
    "MSE Loss",
    "MAE Loss",
    "TV Loss",
    "GDL Loss",
    "Total Loss",
    "Pseudo Validation Loss",
    "EMV Variance",
    "Entropy",
    "Laplacian Var",
    "Tenengrad",
    "Beam Area (Emittance)",
    "PSNR",
)


class TrainLog:
    """One row per recorded iteration, keyed by :data:`LOG_COLUMNS`."""

    def __init__(self):
        self.rows = []

    def append(self, row):
        if set(row) != set(LOG_COLUMNS):
            raise BadParams(f"row keys differ from the log schema: {sorted(set(row) ^ set(LOG_COLUMNS))}")
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise BadParams("iterations must be strictly increasing")
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def iterations(self):
        return np.array([r["iteration"] for r in self.rows], dtype=np.int64)

    def trace(self):
        """``(iteration, variance, pvl)`` triples for :func:`stopping.replay`."""
        return [(r["iteration"], r["EMV Variance"], r["Pseudo Validation Loss"]) for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])

    @classmethod
    def from_csv(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                row = {c: float(rec[c]) for c in LOG_COLUMNS}
                row["schema_version"] = int(row["schema_version"])
                row["iteration"] = int(row["iteration"])
                log.append(row)
        return log


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


@dataclass
class TrainResult:
    restored: NormalizedImage
    log: TrainLog
    report: object
    snapshots: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.restored, self.log, self.report))


def _physical(noisy, values):
    return unshift(denormalize(noisy, values))


def train(noisy, cfg=TrainConfig(), ground_truth=None):
    """Fit a freshly initialised skip network to one normalized image.

    ``ground_truth`` (normalized to the same scale as ``noisy``) only feeds
    the PSNR column. Returns a :class:`TrainResult`, which also unpacks as
    ``(restored, log, report)``.

    The variance tracker sees the training output of every iteration; all
    other metrics use an extra forward pass on the unperturbed input at the
    recorded iterations (the first, every ``metric_interval`` and the last).
    In K-fold mode the folds train in lockstep; losses and PVL are averaged
    over folds and images come from fold 0.
    """
    if not isinstance(noisy, NormalizedImage):
        raise BadParams("train expects a NormalizedImage")
    if noisy.degenerate:
        raise DegenerateInput("input image is constant")
    target = np.asarray(noisy.values, dtype=np.float64)
    H, W = target.shape
    gt = None if ground_truth is None else np.asarray(getattr(ground_truth, "values", ground_truth), dtype=np.float64)

    if cfg.mask_mode == "random":
        masks = [make_random_mask(H, W, cfg.mask_fraction, cfg.seed)]
    else:
        masks = make_kfold_masks(H, W, cfg.kfold_k, cfg.seed)
    netcfg = replace(cfg.net, seed=cfg.seed)
    runs = []
    for m in masks:
        net = SkipNet(netcfg)
        runs.append((net, Adam(net.parameters(), lr=cfg.lr), m))
    weights = weight_map(target, cfg.weight_floor)
    z = sample_input_z(H, W, cfg.seed)

    tracker = VarianceTracker(cfg.es.mode, cfg.es.window)
    state = StopState.from_config(cfg.es, cfg.max_iters)
    log = TrainLog()
    snapshots = {}
    best = None
    lw = cfg.loss_weights
    for t in range(1, cfg.max_iters + 1):
        zt = perturb_input(z, cfg.reg_noise_std, cfg.seed, t)
        parts = np.zeros(5)
        for k, (net, opt, m) in enumerate(runs):
            out = net(zt)
            loss = composite_loss(out, target, weights, m.train_mask, lw)
            vals = loss.values()
            if not math.isfinite(vals["total"]):
                raise DivergedTraining(t, vals["total"])
            parts += [vals["mse"], vals["mae"], vals["tv"], vals["gdl"], vals["total"]]
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            if k == 0:
                variance = tracker.update(out.data)
        parts /= len(runs)

        snap_due = cfg.snapshot_every and t % cfg.snapshot_every == 0
        if not (t == 1 or t % cfg.metric_interval == 0 or t == cfg.max_iters or snap_due):
            continue
        with no_grad():
            evals = [net(z).data[0] for net, _, _ in runs]
        pvl = float(np.mean([pseudo_val_loss(e, target, m) for e, (_, _, m) in zip(evals, runs)]))
        shown = np.clip(evals[0], 0.0, 1.0)
        if snap_due:
            snapshots[t] = shown
        decision, improved = patience_step(state, variance, pvl, t)
        if improved:
            best = shown
        log.append(
            {
                "schema_version": SCHEMA_VERSION,
                "iteration": t,
                "MSE Loss": parts[0],
                "MAE Loss": parts[1],
                "TV Loss": parts[2],
                "GDL Loss": parts[3],
                "Total Loss": parts[4],
                "Pseudo Validation Loss": pvl,
                "EMV Variance": variance,
                "Entropy": shannon_entropy(shown),
                "Laplacian Var": laplacian_variance(evals[0]),
                "Tenengrad": tenengrad(evals[0]),
                "Beam Area (Emittance)": beam_area_metric(_physical(noisy, shown), cfg.area_threshold_fraction),
                "PSNR": psnr(shown, gt) if gt is not None else math.nan,
            }
        )
        if decision == "stop" and cfg.es.enabled:
            break
    if not cfg.es.enabled:
        state.trigger = "max_iters"
    return TrainResult(noisy.with_values(best), log, hybrid_decision(state), snapshots)


# estimator ---------------------------------------------------------------------------


class DIPDenoiser(TransformerMixin, BaseEstimator):
    """Deep-image-prior denoiser for a single scan image.

    ``fit`` shifts and normalizes the image, trains a skip network on it and
    keeps the restored image in the input's units (``restored_``) together
    with ``log_`` and ``stop_report_``. Because the prior is fitted per
    image, ``transform`` refits unless it receives the image seen by ``fit``.
    """

    def __init__(
        self,
        max_iters=2000,
        lr=0.01,
        reg_noise_std=0.03,
        w_mse=1.0,
        w_mae=0.5,
        w_tv=0.05,
        w_gd=0.1,
        weight_floor=0.1,
        mask_mode="random",
        mask_fraction=0.05,
        kfold_k=8,
        early_stopping=True,
        es_mode="emv",
        es_window=100,
        patience=50,
        rel_improvement=1e-4,
        es_rule="and",
        metric_interval=10,
        seed=0,
        snapshot_every=0,
        area_threshold_fraction=0.01,
    ):
        self.max_iters = max_iters
        self.lr = lr
        self.reg_noise_std = reg_noise_std
        self.w_mse = w_mse
        self.w_mae = w_mae
        self.w_tv = w_tv
        self.w_gd = w_gd
        self.weight_floor = weight_floor
        self.mask_mode = mask_mode
        self.mask_fraction = mask_fraction
        self.kfold_k = kfold_k
        self.early_stopping = early_stopping
        self.es_mode = es_mode
        self.es_window = es_window
        self.patience = patience
        self.rel_improvement = rel_improvement
        self.es_rule = es_rule
        self.metric_interval = metric_interval
        self.seed = seed
        self.snapshot_every = snapshot_every
        self.area_threshold_fraction = area_threshold_fraction

    def train_config(self):
        return TrainConfig(
            max_iters=self.max_iters,
            lr=self.lr,
            reg_noise_std=self.reg_noise_std,
            loss_weights=LossWeights(self.w_mse, self.w_mae, self.w_tv, self.w_gd),
            weight_floor=self.weight_floor,
            mask_mode=self.mask_mode,
            mask_fraction=self.mask_fraction,
            kfold_k=self.kfold_k,
            es=ESConfig(
                enabled=self.early_stopping,
                mode=self.es_mode,
                window=self.es_window,
                patience=self.patience,
                rel_improvement=self.rel_improvement,
                rule=self.es_rule,
            ),
            metric_interval=self.metric_interval,
            seed=self.seed,
            snapshot_every=self.snapshot_every,
            area_threshold_fraction=self.area_threshold_fraction,
        )

    @staticmethod
    def _as_scan(X):
        return X if isinstance(X, ScanImage) else ScanImage(np.asarray(X, dtype=np.float64))

    def fit(self, X, y=None):
        """``y`` is an optional clean image in the same units, used for PSNR logging."""
        img = self._as_scan(X)
        norm = normalize(shift_nonnegative(img))
        offset = norm.shift_applied - img.shift_applied
        gt = None
        if y is not None:
            clean = np.asarray(getattr(y, "intensities", y), dtype=np.float64) + offset
            gt = (clean - norm.orig_min) / (norm.orig_max - norm.orig_min)
        result = train(norm, self.train_config(), gt)
        restored = img.with_intensities(denormalize(result.restored).intensities - offset)
        self.fitted_input_ = img
        self.restored_ = restored
        self.restored_normalized_ = result.restored
        self.log_ = result.log
        self.stop_report_ = result.report
        self.snapshots_ = result.snapshots
        return self

    def transform(self, X):
        img = self._as_scan(X)
        if not (hasattr(self, "fitted_input_") and img == self.fitted_input_):
            self.fit(img)
        return self.restored_ if isinstance(X, ScanImage) else np.array(self.restored_.intensities)
