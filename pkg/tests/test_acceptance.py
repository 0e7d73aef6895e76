"""Acceptance criteria 1-11 on synthetic ground truth.

The long criteria (3, 4, 6, 8) share one set of uncapped 2000-iteration runs
on the default beam; early stopping is obtained by replaying the stop
automaton on each run's (variance, PVL) trace. A criterion table is printed at
the end of the session.
"""

import math
import time

import numpy as np
import pytest

from beamdip import cli
from beamdip.autodiff import Tensor, channel_norm, concat_channels, conv2d, leaky_relu, upsample_bilinear2x
from beamdip.clustering import dbscan, gmm_fit
from beamdip.dipnet import DIPDenoiser, NetConfig, SkipNet, TrainConfig, sample_input_z, train
from beamdip.emittance import compute_stats, ellipse_area, radial_profile, twiss, PhaseSpaceStats, TwissTriple
from beamdip.image_io import ScanImage, denormalize, normalize, shift_nonnegative, subtract_background, unshift
from beamdip.losses import composite_loss, psnr, weight_map
from beamdip.stopping import ESConfig, replay
from beamdip.synth import BeamSpec, NoiseSpec, add_noise, generate_beam
from oracles import brute_stats, central_diff, directional_diff, reachability_partition, rel_err, same_partition

pytestmark = pytest.mark.acceptance

SEEDS = range(10)
MAX_ITERS = 2000
NOISE_STD = 0.05
EMITTANCE_THRESHOLD = 0.02


def _frac(flags):
    return f"{int(sum(flags))}/{len(flags)}"


# 1 ------------------------------------------------------------------------------------


def test_c01_emittance_oracle(criterion):
    rng = np.random.default_rng(0)
    worst, twiss_worst = 0.0, 0.0
    for _ in range(200):
        r, c = rng.integers(2, 33, size=2)
        img = ScanImage(rng.random((r, c)), x_origin=rng.normal(), x_step=rng.uniform(0.1, 2), xp_origin=rng.normal(), xp_step=rng.uniform(0.1, 2))
        st = compute_stats(img)
        ref = brute_stats(img.intensities, img.x_coords, img.xp_coords)
        for key in ("mean_x", "mean_xp", "var_x", "var_xp", "cov_xxp", "emittance_rms"):
            worst = max(worst, abs(getattr(st, key) - ref[key]) / max(abs(ref[key]), 1e-300))
        if st.emittance_rms > 0:
            tw = twiss(st)
            twiss_worst = max(twiss_worst, abs(tw.beta * tw.gamma - tw.alpha**2 - 1))
    exact = all(ellipse_area(e, n) == n * n * (math.pi * e) for e in (0.1, 0.7, 1.0, 3.3) for n in (1, 2, 3, 4))
    ok = worst <= 1e-9 and twiss_worst <= 1e-9 and exact
    criterion(1, ok, f"max rel err {worst:.1e}, twiss identity {twiss_worst:.1e}, ellipse exact={exact}")
    assert ok


# 2 ------------------------------------------------------------------------------------


def _op_grad_err(build, arrays, seed):
    rng = np.random.default_rng(seed + 7000)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    probe = rng.normal(size=out.shape)
    (out * probe).sum().backward()

    def f():
        return float((build(*[Tensor(a) for a in arrays]).data * probe).sum())

    return max(rel_err(t.grad, central_diff(f, a)) for t, a in zip(tensors, arrays))


def _off_kinks(rng, margin=1e-3):
    """Draw (out, target) whose |.| arguments in the loss all clear the FD step by a wide margin."""
    while True:
        out, t = rng.random((1, 6, 7)), rng.random((6, 7))
        o = out[0]
        args = [o - t, np.diff(o, axis=0), np.diff(o, axis=1), np.diff(o - t, axis=0), np.diff(o - t, axis=1)]
        if min(np.abs(a).min() for a in args) > margin:
            return out, t


def test_c02_gradient_correctness(criterion):
    worst_op, worst_net = 0.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 6, 4))
        w3 = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        g, be = rng.normal(size=(2,)), rng.normal(size=(2,))
        ops = [
            (lambda x, w, b: conv2d(x, w, b, stride=1), [x, w3, b]),
            (lambda x, w, b: conv2d(x, w, b, stride=2), [x, w3, b]),
            (lambda x: leaky_relu(x, 0.01), [x + 0.05 * np.sign(x)]),
            (lambda x, g, b: channel_norm(x, g, b), [x, g, be]),
            (upsample_bilinear2x, [x]),
            (concat_channels, [x, rng.normal(size=(1, 6, 4))]),
            (lambda x: (x[:, 1:, :] - x[:, :-1, :]).abs() * x[:, 1:, :], [x]),
        ]
        for build, arrays in ops:
            worst_op = max(worst_op, _op_grad_err(build, arrays, seed))
        out, t = _off_kinks(rng)
        m = rng.random((6, 7)) > 0.25
        for comp in ("mse", "mae", "tv", "gdl", "total"):
            xt = Tensor(out, requires_grad=True)
            getattr(composite_loss(xt, t, weight_map(t), m), comp).backward()
            num = central_diff(lambda: float(getattr(composite_loss(out, t, weight_map(t), m), comp).data), out)
            worst_op = max(worst_op, rel_err(xt.grad, num))

        # end to end: composite loss through the whole skip network, along a random direction;
        # the small step keeps the probe from crossing a leaky-relu or |.| kink
        net = SkipNet(NetConfig(seed=seed, down_filters=8, up_filters=8))
        z = sample_input_z(16, 16, seed)
        target = rng.random((16, 16))
        mask = rng.random((16, 16)) > 0.1
        params = net.parameters()
        for p in params:
            p.zero_grad()
        composite_loss(net(z), target, weight_map(target), mask).total.backward()
        dirs = [rng.normal(size=p.data.shape) for p in params]
        analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))
        numeric = directional_diff(lambda: float(composite_loss(net(z), target, weight_map(target), mask).total.data), [p.data for p in params], dirs, h=1e-7)
        worst_net = max(worst_net, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-300))
    ok = worst_op <= 1e-4 and worst_net <= 1e-3
    criterion(2, ok, f"per-op max rel err {worst_op:.1e} (<=1e-4), end-to-end {worst_net:.1e} (<=1e-3), 100 seeds")
    assert ok


# shared long runs -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_runs():
    clean, truth = generate_beam(BeamSpec())
    runs = []
    for seed in SEEDS:
        noisy = add_noise(clean, NoiseSpec(params={"std": NOISE_STD}, seed=seed))
        norm = normalize(shift_nonnegative(noisy))
        gt = (clean.intensities + norm.shift_applied - norm.orig_min) / (norm.orig_max - norm.orig_min)
        cfg = TrainConfig(max_iters=MAX_ITERS, seed=seed, es=ESConfig(enabled=False), snapshot_every=10 if seed == 0 else 0)
        res = train(norm, cfg, gt)
        es = replay(res.log.trace(), ESConfig(), MAX_ITERS)
        runs.append(dict(seed=seed, norm=norm, gt=gt, res=res, es=es, psnr_noisy=psnr(norm.values, gt)))
    return dict(clean=clean, truth=truth, runs=runs)


def test_c03_convergence_speed(default_runs, criterion):
    flags, fracs = [], []
    for r in default_runs["runs"]:
        lg = r["res"].log
        loss = lg.column("Total Loss")
        i400 = list(lg.iterations).index(400)
        frac = (loss[0] - loss[i400]) / (loss[0] - loss[-1])
        fracs.append(frac)
        flags.append(frac >= 0.9)
    ok = sum(flags) >= 8
    criterion(3, ok, f"{_frac(flags)} seeds with >=90% of the drop by iteration 400 (min {min(fracs):.3f})")
    assert ok


def test_c04_early_denoising(default_runs, criterion):
    flags = []
    for r in default_runs["runs"]:
        lg = r["res"].log
        early = lg.column("PSNR")[np.asarray(lg.iterations) <= 30]
        flags.append(early.max() > r["psnr_noisy"])
    ok = sum(flags) >= 9
    criterion(4, ok, f"{_frac(flags)} seeds beat the noisy PSNR by iteration 30")
    assert ok


def test_c06_emittance_recovery(default_runs, criterion):
    truth = default_runs["truth"].emittance_rms
    r = default_runs["runs"][0]
    best = r["es"].best_iter
    shown = r["res"].snapshots[best]
    restored = unshift(denormalize(r["norm"], shown))
    st, _ = cli.emittance_summary(restored, EMITTANCE_THRESHOLD)
    dip_err = abs(st.emittance_rms / truth - 1)
    # the mis-thresholded estimate keeps every pixel of the shifted noisy scan
    raw = compute_stats(denormalize(r["norm"])).emittance_rms
    raw_err = abs(raw / truth - 1)
    ok = dip_err <= 0.10 and raw_err > 0.5
    criterion(6, ok, f"DIP eps {st.emittance_rms:.3f} (err {dip_err:.1%}) at ES iter {best}; raw eps {raw:.2f} (err {raw_err:.0%})")
    assert ok


def test_c08_early_stopping_alignment(default_runs, criterion):
    psnr_flags, align_flags, detail = [], [], []
    for r in default_runs["runs"]:
        lg = r["res"].log
        it = lg.iterations
        p_opt = int(it[np.argmax(lg.column("PSNR"))])
        best = r["es"].best_iter
        psnr_flags.append(abs(best - p_opt) / p_opt <= 0.25)
        rep, _ = cli.align_from_log(lg, ESConfig(), MAX_ITERS)
        align_flags.append(not rep.monotone and rep.relative_gap <= 0.25)
        detail.append(f"{best}/{p_opt}/{rep.area_iter}")
    ok = sum(psnr_flags) >= 8 and sum(align_flags) >= 7
    criterion(
        8,
        ok,
        f"ES vs PSNR-opt {_frac(psnr_flags)} (need 8), ES vs beam-area {_frac(align_flags)} (need 7); es/psnr/area iters {' '.join(detail)}",
    )
    assert ok


# 5 --------------------------------------------------------------------------------------------

# 12 cells with noise >= 0.05: peak x grid x noise at unit emittance. The grid spans a
# fixed number of sigmas, so emittance only relabels the axes and would repeat images.
BENCH_CELLS = [(1.0, p, g, s) for p in (0.5, 1.0, 2.0) for g in (64, 128) for s in (0.05, 0.1)]


def test_c05_denoising_quality(tmp_path, criterion):
    cfg = cli.RunConfig.build("benchmark", {"out": str(tmp_path)})
    rows = cli.run_benchmark(cfg, BENCH_CELLS)
    assert all(r["error"] is None for r in rows)
    wins = [r["psnr_gain_dip"] >= r["psnr_gain_median"] for r in rows]
    margin = min(r["psnr_gain_dip"] - r["psnr_gain_median"] for r in rows)
    ok = sum(wins) >= 8
    criterion(5, ok, f"DIP gain >= 3x3 median gain in {_frac(wins)} cells (need 8), smallest margin {margin:+.2f} dB")
    assert ok


# 7 --------------------------------------------------------------------------------------------

HALO_NOISE_STD = 0.001


def test_c07_halo_resolution(criterion):
    spec = BeamSpec(halo_amplitude_ratio=1e-3, halo_sigma_scale=2.5, extent=8.0)
    clean, truth = generate_beam(spec)
    noisy = add_noise(clean, NoiseSpec(params={"std": HALO_NOISE_STD}, seed=0))
    est = DIPDenoiser(seed=0).fit(noisy, clean)
    st = PhaseSpaceStats.from_twiss(TwissTriple(spec.alpha, spec.beta, spec.gamma), spec.emittance)
    # one bin per pixel pitch in normalized radius
    bins = int(round(7.5 / (spec.x_step / math.sqrt(spec.beta * spec.emittance))))

    def errors(img):
        p = radial_profile(subtract_background(img), st, bins=bins, r_max=7.5)
        ana = truth.radial_profile(p.mean_r)
        sel = (p.centers >= 4) & (p.centers <= 7) & (ana >= 1e-4 * truth.radial_profile(0.0)) & (p.counts > 0)
        return np.abs(p.mean_intensity[sel] / ana[sel] - 1), ana[sel]

    e_noisy, ana = errors(noisy)
    e_dip, _ = errors(est.restored_)
    assert HALO_NOISE_STD > ana.max()  # per-pixel SNR < 1 across the scored halo zone
    wins = e_dip < e_noisy
    ok = wins.size > 0 and wins.mean() >= 0.8
    criterion(7, ok, f"restored profile closer in {_frac(wins)} bins over [4, 7] sigma (median err DIP {np.median(e_dip):.2f} vs noisy {np.median(e_noisy):.2f})")
    assert ok


# 9 --------------------------------------------------------------------------------------------


def test_c09_clustering_oracles(criterion):
    rng = np.random.default_rng(9)
    partitions = []
    for _ in range(50):
        n = int(rng.integers(10, 501))
        pts = rng.uniform(0, 20, size=(n, 2))
        eps, mp = float(rng.uniform(0.5, 2.0)), int(rng.integers(2, 8))
        lab = dbscan(pts, eps, mp).labels
        core, comp = reachability_partition(pts, eps, mp)
        partitions.append(same_partition(lab[core], comp[core]) and np.all(lab[core] >= 0))
    monotone = []
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        X = np.vstack([r.normal(r.uniform(-5, 5, 2), r.uniform(0.3, 2), size=(60, 2)) for _ in range(3)])
        tr = gmm_fit(X, k=int(r.integers(2, 4)), seed=seed).log_likelihood
        monotone.append(bool(np.all(np.diff(tr) >= -1e-9)))
    ok = all(partitions) and all(monotone)
    criterion(9, ok, f"DBSCAN core partitions {_frac(partitions)}, GMM monotone traces {_frac(monotone)}")
    assert ok


# 10 -------------------------------------------------------------------------------------------


def test_c10_throughput(criterion):
    clean, _ = generate_beam(BeamSpec(rows=316, cols=316))
    noisy = add_noise(clean, NoiseSpec(params={"std": NOISE_STD}, seed=0))
    norm = normalize(shift_nonnegative(noisy))
    t0 = time.perf_counter()
    train(norm, TrainConfig(max_iters=300, es=ESConfig(enabled=False)))
    secs = time.perf_counter() - t0
    ok = secs <= 2 * 240
    criterion(10, ok, f"{norm.values.size} px x 300 iterations in {secs:.0f} s (limit 240 s, 2x on constrained CI)")
    assert ok


# 11 -------------------------------------------------------------------------------------------


def test_c11_determinism(tmp_path, criterion):
    args = ["denoise", "--max-iters", "150", "--set", "beam.rows=64", "--set", "beam.cols=64"]
    outs = []
    for name in ("a", "b"):
        assert cli.main([*args, "--out", str(tmp_path / name)]) == 0
        d = tmp_path / name / "synthetic"
        outs.append(((d / "log.csv").read_bytes(), (d / "restored.csv").read_bytes()))
    ok = outs[0] == outs[1]
    criterion(11, ok, "TrainLog CSV and restored grid byte-identical across two runs" if ok else "outputs differ")
    assert ok
