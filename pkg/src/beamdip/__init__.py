"""Deep-image-prior denoising and emittance analysis of beam phase-space scans."""

from .clustering import ClusterLabels, GaussianMixtureSegmenter, PointCloud, dbscan, gmm_fit, hdbscan, threshold_partition
from .dipnet import DIPDenoiser, NetConfig, TrainConfig, TrainLog, build_skip_net, train
from .emittance import PhaseSpaceStats, TwissTriple, beam_area_metric, compute_stats, ellipse_area, radial_profile, twiss
from .image_io import ScanImage, load_scan, median_filter, normalize, save_scan
from .losses import LossWeights, composite_loss, psnr
from .stopping import ESConfig, StopReport, make_kfold_masks, make_random_mask, pseudo_val_loss
from .synth import BeamSpec, NoiseSpec, add_noise, generate_beam

__version__ = "0.1.0"

__all__ = [
    "BeamSpec",
    "ClusterLabels",
    "DIPDenoiser",
    "ESConfig",
    "GaussianMixtureSegmenter",
    "LossWeights",
    "NetConfig",
    "NoiseSpec",
    "PhaseSpaceStats",
    "PointCloud",
    "ScanImage",
    "StopReport",
    "TrainConfig",
    "TrainLog",
    "TwissTriple",
    "add_noise",
    "beam_area_metric",
    "build_skip_net",
    "composite_loss",
    "compute_stats",
    "dbscan",
    "ellipse_area",
    "generate_beam",
    "gmm_fit",
    "hdbscan",
    "load_scan",
    "make_kfold_masks",
    "make_random_mask",
    "median_filter",
    "normalize",
    "pseudo_val_loss",
    "psnr",
    "radial_profile",
    "save_scan",
    "threshold_partition",
    "train",
    "twiss",
]
