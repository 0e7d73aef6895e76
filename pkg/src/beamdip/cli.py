"""Command-line runs: denoise, align, benchmark, triage, synth and segment.

Configuration is a flat set of dotted keys. Values come from the built-in
defaults, then an optional ``key = value`` file (``--config``), then the
command-line flags; later sources win.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .clustering import PointCloud, dbscan, gmm_fit, hdbscan
from .dipnet import LOG_COLUMNS, SCHEMA_VERSION, DIPDenoiser
from .emittance import compute_stats, twiss
from .exceptions import BeamDIPError, ConfigError
from .image_io import load_scan, median_filter, save_scan, triage, write_pgm
from .losses import psnr
from .stopping import ESConfig, replay
from .synth import BeamSpec, NoiseSpec, add_noise, generate_beam

log = logging.getLogger("beamdip")

DEFAULTS = {
    "input": "",
    "out": "beamdip-out",
    "seed": 0,
    "jobs": 1,
    "train.max_iters": 2000,
    "train.lr": 0.01,
    "train.reg_noise_std": 0.03,
    "train.mask_mode": "random",
    "train.mask_fraction": 0.05,
    "train.kfold_k": 8,
    "train.metric_interval": 10,
    "train.weight_floor": 0.1,
    "loss.mse": 1.0,
    "loss.mae": 0.5,
    "loss.tv": 0.05,
    "loss.gd": 0.1,
    "es.enabled": True,
    "es.mode": "emv",
    "es.window": 100,
    "es.patience": 50,
    "es.rel_improvement": 1e-4,
    "es.rule": "and",
    "export.snapshots": 0,
    "beam.emittance": 1.0,
    "beam.alpha": 0.0,
    "beam.beta": 1.0,
    "beam.peak": 1.0,
    "beam.halo_ratio": 0.0,
    "beam.halo_scale": 1.0,
    "beam.rows": 128,
    "beam.cols": 128,
    "beam.extent": 6.0,
    "noise.model": "gaussian-additive",
    "noise.std": 0.05,
    "emittance.threshold_fraction": 0.02,
    "area.threshold_fraction": 0.01,
    "align.smooth": 5,
    "align.rise": 0.05,
    "bench.emittance": "0.5,1,2",
    "bench.peak": "0.5,1,2",
    "bench.grid": "64,128,256",
    "bench.noise": "0.02,0.05,0.1",
    "triage.copy_accepted": False,
    "segment.method": "hdbscan",
    "segment.floor": 0.1,
    "segment.eps": 2.0,
    "segment.min_pts": 8,
    "segment.min_cluster_size": 25,
    "segment.k": 2,
}

_NOISE_SCALE_KEY = {"uniform-additive": "a", "salt-pepper": "p", "poisson": "scale"}

# keys that do not change any result
_UNHASHED = ("out", "jobs")


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not (isinstance(default, bool) ^ isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return text


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def build(cls, command, file_values=None, overrides=None):
        values = dict(DEFAULTS)
        for source in (file_values or {}, overrides or {}):
            for key, raw in source.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key {key!r}")
                values[key] = _coerce(key, raw)
        cfg = cls(command, values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        if self["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.estimator().train_config()
            if self.command in ("denoise", "align", "synth", "benchmark") and not self.inputs():
                self.beam_spec()
                self.noise_spec()
        except BeamDIPError as exc:
            raise ConfigError(str(exc)) from None
        for p in self.inputs():
            if not Path(p).exists():
                raise ConfigError(f"input path does not exist: {p}")

    def inputs(self):
        return [s for s in self["input"].split(",") if s]

    def config_hash(self):
        payload = {k: v for k, v in sorted(self.values.items()) if k not in _UNHASHED}
        payload["command"] = self.command
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def estimator(self, seed=None):
        v = self.values
        return DIPDenoiser(
            max_iters=v["train.max_iters"],
            lr=v["train.lr"],
            reg_noise_std=v["train.reg_noise_std"],
            w_mse=v["loss.mse"],
            w_mae=v["loss.mae"],
            w_tv=v["loss.tv"],
            w_gd=v["loss.gd"],
            weight_floor=v["train.weight_floor"],
            mask_mode=v["train.mask_mode"],
            mask_fraction=v["train.mask_fraction"],
            kfold_k=v["train.kfold_k"],
            early_stopping=v["es.enabled"],
            es_mode=v["es.mode"],
            es_window=v["es.window"],
            patience=v["es.patience"],
            rel_improvement=v["es.rel_improvement"],
            es_rule=v["es.rule"],
            metric_interval=v["train.metric_interval"],
            seed=v["seed"] if seed is None else seed,
            snapshot_every=v["export.snapshots"],
            area_threshold_fraction=v["area.threshold_fraction"],
        )

    def es_config(self):
        v = self.values
        return ESConfig(
            enabled=v["es.enabled"],
            mode=v["es.mode"],
            window=v["es.window"],
            patience=v["es.patience"],
            rel_improvement=v["es.rel_improvement"],
            rule=v["es.rule"],
        )

    def beam_spec(self, **changes):
        v = self.values
        kw = dict(
            emittance=v["beam.emittance"],
            alpha=v["beam.alpha"],
            beta=v["beam.beta"],
            peak_intensity=v["beam.peak"],
            halo_amplitude_ratio=v["beam.halo_ratio"],
            halo_sigma_scale=v["beam.halo_scale"],
            rows=v["beam.rows"],
            cols=v["beam.cols"],
            extent=v["beam.extent"],
        )
        kw.update(changes)
        return BeamSpec(**kw)

    def noise_spec(self, seed=None, **params):
        # noise.std feeds whichever scale parameter the model takes
        key = _NOISE_SCALE_KEY.get(self["noise.model"], "std")
        p = {key: self["noise.std"], **params}
        return NoiseSpec(self["noise.model"], p, seed=self["seed"] if seed is None else seed)


# shared helpers ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    """Every emitted table starts with a ``schema_version`` column."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("schema_version",) + tuple(header))
        for r in rows:
            w.writerow((SCHEMA_VERSION,) + tuple(_cell(x) for x in r))


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return "" if x is None else x


def emittance_summary(img, fraction):
    """Stats and Twiss of the pixels at or above ``fraction`` of the peak."""
    I = img.intensities
    st = compute_stats(img, mask=I >= fraction * I.max())
    try:
        tw = asdict(twiss(st))
    except BeamDIPError:
        tw = None
    return st, tw


def _synthetic(cfg, seed):
    clean, truth = generate_beam(cfg.beam_spec())
    return clean, truth, add_noise(clean, cfg.noise_spec(seed))


def _images(cfg):
    """``(name, noisy, clean)`` per work item; clean is None for files."""
    paths = cfg.inputs()
    if not paths:
        return [("synthetic", None, None)]
    items = []
    for p in map(Path, paths):
        files = sorted(q for q in p.iterdir() if q.suffix in (".csv", ".dat")) if p.is_dir() else [p]
        items.extend((f.stem, str(f), None) for f in files)
    return items


@dataclass
class RunSummary:
    command: str
    config_hash: str
    images: list = field(default_factory=list)
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def write(self, out):
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _run_pool(fn, args, jobs):
    if jobs == 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


# denoise ------------------------------------------------------------------------------------


def _denoise_one(cfg, name, path, out):
    t0 = time.perf_counter()
    rec = {"image": name, "error": None}
    try:
        if path is None:
            clean, _, noisy = _synthetic(cfg, cfg["seed"])
        else:
            clean, noisy = None, load_scan(path)
        est = cfg.estimator().fit(noisy, clean)
        dest = out / name
        dest.mkdir(parents=True, exist_ok=True)
        restored = est.restored_
        save_scan(restored, dest / "restored.csv")
        write_pgm(dest / "restored.pgm", est.restored_normalized_.values)
        write_pgm(dest / "input.pgm", _unit(noisy.intensities))
        est.log_.to_csv(dest / "log.csv")
        it = est.log_.iterations
        for col in LOG_COLUMNS[2:]:
            slug = col.lower().replace(" ", "_").replace("(", "").replace(")", "")
            _write_csv(dest / "curves" / f"{slug}.csv", ("iteration", "value"), zip(it.tolist(), est.log_.column(col).tolist()))
        if est.snapshots_:
            (dest / "snapshots").mkdir(exist_ok=True)
        for k, snap in sorted(est.snapshots_.items()):
            write_pgm(dest / "snapshots" / f"iter_{k:06d}.pgm", snap)
        st, tw = emittance_summary(restored, cfg["emittance.threshold_fraction"])
        rec.update(
            stop=est.stop_report_.to_dict(),
            stats=st.to_dict(),
            twiss=tw,
            beam_area=math.pi * st.emittance_rms,
            psnr=None if clean is None else psnr(restored.intensities, clean.intensities, clean.intensities.max()),
            psnr_input=None if clean is None else psnr(noisy.intensities, clean.intensities, clean.intensities.max()),
        )
    except (BeamDIPError, OSError, ValueError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.error("%s failed: %s", name, rec["error"])
    rec["seconds"] = time.perf_counter() - t0
    return rec


def _unit(a):
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def run_denoise(cfg):
    out = Path(cfg["out"])
    summary = RunSummary("denoise", cfg.config_hash())
    out.mkdir(parents=True, exist_ok=True)
    recs = _run_pool(_denoise_one, [(cfg, n, p, out) for n, p, _ in _images(cfg)], cfg["jobs"])
    for rec in recs:
        rec["config_hash"] = summary.config_hash
        summary.images.append(rec)
        summary.failures += rec["error"] is not None
    summary.write(out)
    return summary


# align --------------------------------------------------------------------------------------


@dataclass
class AlignReport:
    es_best_iter: int
    es_stop_iter: int
    area_iter: int
    relative_gap: float
    monotone: bool
    trace_path: str = ""


def area_optimal_iteration(iterations, area, smooth=5, rise=0.05):
    """Iteration of the smoothed beam-area minimum that is later followed by a rise.

    Smoothing is a centred running mean over ``smooth`` recorded points.

    Returns ``(iteration, monotone)``; ``monotone`` is True (and the
    iteration None) when the smoothed trace never climbs ``rise`` above its
    minimum afterwards.
    """
    a = np.asarray(area, dtype=np.float64)
    s = _running_mean(a, smooth)
    i = int(np.argmin(s))
    after = s[i:]
    if after.max() <= s[i] * (1 + rise) or not np.isfinite(s[i]):
        return None, True
    return int(iterations[i]), False


def _running_mean(a, k):
    h = max(int(k), 1) // 2
    return np.array([a[max(0, i - h) : i + h + 1].mean() for i in range(a.size)])


def align_from_log(lg, es=ESConfig(), max_iters=None, smooth=5, rise=0.05):
    """Alignment report from an uncapped training log.

    The ES run is a prefix of the uncapped one (same seeds, same updates), so
    replaying the stop automaton on the uncapped (variance, PVL) trace gives
    the ES result without a second training run.
    """
    rep = replay(lg.trace(), ESConfig(**{**asdict(es), "enabled": True}), max_iters)
    area_iter, monotone = area_optimal_iteration(lg.iterations, lg.column("Beam Area (Emittance)"), smooth, rise)
    # same convention as the stop report: relative to the ES iteration
    gap = math.nan if monotone else abs(rep.best_iter - area_iter) / max(rep.best_iter, 1)
    return AlignReport(rep.best_iter, rep.stop_iter, area_iter, gap, monotone), rep


def run_align(cfg, image=None, clean=None):
    """Train once without ES to the cap, then compare the ES iteration with the beam-area minimum."""
    out = Path(cfg["out"])
    if image is None:
        if cfg.inputs():
            image = load_scan(cfg.inputs()[0])
        else:
            clean, _, image = _synthetic(cfg, cfg["seed"])
    est = cfg.estimator().set_params(early_stopping=False).fit(image, clean)
    lg = est.log_
    report, rep = align_from_log(lg, cfg.es_config(), cfg["train.max_iters"], cfg["align.smooth"], cfg["align.rise"])
    it, area = lg.iterations, lg.column("Beam Area (Emittance)")
    smooth = _running_mean(area, cfg["align.smooth"])
    trace_path = out / "beam_area_trace.csv"
    _write_csv(trace_path, ("iteration", "beam_area", "smoothed"), zip(it.tolist(), area.tolist(), smooth.tolist()))
    lg.to_csv(out / "log.csv")
    report.trace_path = str(trace_path)
    summary = RunSummary("align", cfg.config_hash(), extra={"align": asdict(report), "stop": rep.to_dict()})
    summary.write(out)
    return report


# benchmark ----------------------------------------------------------------------------------

BENCH_HEADER = (
    "cell",
    "emittance",
    "peak",
    "grid",
    "noise_std",
    "seed",
    "psnr_noisy",
    "psnr_gain_dip",
    "psnr_gain_median",
    "eps_true",
    "eps_err_raw",
    "eps_err_median",
    "eps_err_dip",
    "best_iter",
    "stop_iter",
    "seconds",
    "error",
)


def _floats(text):
    return [float(s) for s in str(text).split(",") if s.strip()]


def sweep_cells(cfg):
    return [
        (e, p, int(g), s)
        for e in _floats(cfg["bench.emittance"])
        for p in _floats(cfg["bench.peak"])
        for g in _floats(cfg["bench.grid"])
        for s in _floats(cfg["bench.noise"])
    ]


def _rel_err(img, fraction, truth):
    try:
        st, _ = emittance_summary(img, fraction)
    except BeamDIPError:
        return math.nan
    return abs(st.emittance_rms / truth - 1)


def benchmark_cell(cfg, index, emittance, peak, grid, std):
    """One sweep cell: DIP and 3x3 median against the noisy input and the truth."""
    t0 = time.perf_counter()
    seed = cfg["seed"]
    row = dict(cell=index, emittance=emittance, peak=peak, grid=grid, noise_std=std, seed=seed, error=None)
    try:
        spec = cfg.beam_spec(emittance=emittance, peak_intensity=peak, rows=grid, cols=grid)
        clean, truth = generate_beam(spec)
        noisy = add_noise(clean, NoiseSpec(params={"std": std}, seed=seed))
        est = cfg.estimator().fit(noisy, clean)
        med = median_filter(noisy, 3)
        C, top = clean.intensities, float(clean.intensities.max())
        base = psnr(noisy.intensities, C, top)
        frac = cfg["emittance.threshold_fraction"]
        eps = truth.emittance_rms
        row.update(
            psnr_noisy=base,
            psnr_gain_dip=psnr(est.restored_.intensities, C, top) - base,
            psnr_gain_median=psnr(med.intensities, C, top) - base,
            eps_true=eps,
            eps_err_raw=_rel_err(noisy, frac, eps),
            eps_err_median=_rel_err(med, frac, eps),
            eps_err_dip=_rel_err(est.restored_, frac, eps),
            best_iter=est.stop_report_.best_iter,
            stop_iter=est.stop_report_.stop_iter,
        )
    except (BeamDIPError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    row["seconds"] = time.perf_counter() - t0
    return row


def run_benchmark(cfg, cells=None):
    out = Path(cfg["out"])
    cells = sweep_cells(cfg) if cells is None else cells
    rows = _run_pool(benchmark_cell, [(cfg, i, *c) for i, c in enumerate(cells)], cfg["jobs"])
    _write_csv(out / "benchmark.csv", BENCH_HEADER, ([r.get(h) for h in BENCH_HEADER] for r in rows))
    summary = RunSummary("benchmark", cfg.config_hash(), failures=sum(r["error"] is not None for r in rows))
    summary.extra["cells"] = len(rows)
    summary.write(out)
    return rows


# triage / synth / segment ---------------------------------------------------------------------


def run_triage(cfg):
    out = Path(cfg["out"])
    files = []
    for p in map(Path, cfg.inputs()):
        files.extend(sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p])
    rows = []
    for f in files:
        try:
            d = triage(load_scan(f))
            rows.append((str(f), "accept" if d.accept else "reject", d.reason, d.peak_to_median, d.centroid_offset, d.occupied))
        except (BeamDIPError, OSError, ValueError, UnicodeDecodeError):
            rows.append((str(f), "reject", "unreadable", None, None, None))
            continue
        if d.accept and cfg["triage.copy_accepted"]:
            (out / "accepted").mkdir(parents=True, exist_ok=True)
            shutil.copy2(f, out / "accepted" / f.name)
    _write_csv(out / "manifest.csv", ("file", "decision", "reason", "peak_to_median", "centroid_offset", "occupied"), rows)
    summary = RunSummary("triage", cfg.config_hash())
    summary.extra = {"files": len(rows), "accepted": sum(r[1] == "accept" for r in rows)}
    summary.write(out)
    return rows


def run_synth(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    clean, truth, noisy = _synthetic(cfg, cfg["seed"])
    save_scan(clean, out / "clean.csv")
    save_scan(noisy, out / "noisy.csv")
    write_pgm(out / "clean.pgm", _unit(clean.intensities))
    write_pgm(out / "noisy.pgm", _unit(noisy.intensities))
    summary = RunSummary("synth", cfg.config_hash(), extra={"emittance_rms": truth.emittance_rms, "spec": asdict(truth.spec)})
    summary.write(out)
    return summary


def run_segment(cfg):
    out = Path(cfg["out"])
    summary = RunSummary("segment", cfg.config_hash())
    for name, path, _ in _images(cfg):
        img = load_scan(path) if path else _synthetic(cfg, cfg["seed"])[2]
        I = img.intensities
        cloud = PointCloud.from_image(img, cfg["segment.floor"] * float(I.max()))
        method = cfg["segment.method"]
        if method == "dbscan":
            step = max(img.x_step, img.xp_step)
            labels = dbscan(cloud, cfg["segment.eps"] * step, cfg["segment.min_pts"]).labels
        elif method == "hdbscan":
            labels = hdbscan(cloud, cfg["segment.min_cluster_size"]).labels
        elif method == "gmm":
            labels = gmm_fit(cloud, cfg["segment.k"], seed=cfg["seed"]).labels
        else:
            raise ConfigError(f"unknown segment.method {method!r}")
        rows = zip(cloud.points[:, 0].tolist(), cloud.points[:, 1].tolist(), cloud.intensity.tolist(), labels.tolist())
        _write_csv(out / name / "labels.csv", ("x", "xp", "intensity", "label"), rows)
        summary.images.append({"image": name, "points": cloud.n, "clusters": int(np.unique(labels[labels >= 0]).size)})
    summary.write(out)
    return summary


# entry point ------------------------------------------------------------------------------------

COMMANDS = ("denoise", "align", "benchmark", "triage", "synth", "segment")


def build_parser():
    parser = argparse.ArgumentParser(prog="beamdip", description="Deep-image-prior denoising of beam phase-space scans")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value file with dotted keys")
    parser.add_argument("--input", action="append", help="scan file or directory (repeatable)")
    parser.add_argument("--out")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--max-iters", type=int)
    parser.add_argument("--no-es", action="store_true", help="disable early stopping")
    parser.add_argument("--export-snapshots", type=int, metavar="N", help="write a graymap every N iterations")
    parser.add_argument("--mask-mode", choices=("random", "kfold"))
    parser.add_argument("--kfold-k", type=int)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args):
    file_values = read_config_file(args.config) if args.config else {}
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    flags = {
        "input": ",".join(args.input) if args.input else None,
        "out": args.out,
        "seed": args.seed,
        "jobs": args.jobs,
        "train.max_iters": args.max_iters,
        "export.snapshots": args.export_snapshots,
        "train.mask_mode": args.mask_mode,
        "train.kfold_k": args.kfold_k,
        "es.enabled": False if args.no_es else None,
    }
    over.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig.build(args.command, file_values, over)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    runner = {
        "denoise": run_denoise,
        "align": run_align,
        "benchmark": run_benchmark,
        "triage": run_triage,
        "synth": run_synth,
        "segment": run_segment,
    }[cfg.command]
    try:
        result = runner(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BeamDIPError, OSError, ValueError) as exc:
        # the summary must exist even when the whole run fails
        RunSummary(cfg.command, cfg.config_hash(), failures=1, extra={"error": f"{type(exc).__name__}: {exc}"}).write(Path(cfg["out"]))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    failures = getattr(result, "failures", 0)
    if isinstance(result, list) and result and isinstance(result[0], dict):
        failures = sum(r.get("error") is not None for r in result)
    if isinstance(result, AlignReport):
        print(json.dumps(asdict(result), default=_jsonable))
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
