"""Feature-space image quality toolkit for ultrasound.

Full-reference and no-reference quality metrics over a pluggable token
feature extractor, a PSNR-matched degradation suite, rank-statistics
evaluation protocols, and a blinded 2AFC study runner.
"""

__version__ = "0.1.0"

from .degrade import DegradationSpec, PsnrTarget, apply, calibrate_to_psnr, severity_sweep
from .features import BuiltinEncoder, ExternalFeatureExtractor
from .fr import FrConfig, gram_distance, structural_distance, token_loss, ulpips
from .image import GrayImage, load_image, psnr, resize_bilinear, save_png, tile
from .nr import NrqConfig, fit_bank, fit_gmm, fit_pca, log_density, nrq_score
from .stats import (
    binomial_test_two_sided,
    iqr,
    kendall_tau,
    kendall_w,
    run_protocol,
    spearman,
    wilson_ci,
)
from .store import load_bank, save_bank

__all__ = [
    "BuiltinEncoder",
    "DegradationSpec",
    "ExternalFeatureExtractor",
    "FrConfig",
    "GrayImage",
    "NrqConfig",
    "PsnrTarget",
    "apply",
    "binomial_test_two_sided",
    "calibrate_to_psnr",
    "fit_bank",
    "fit_gmm",
    "fit_pca",
    "gram_distance",
    "iqr",
    "kendall_tau",
    "kendall_w",
    "load_bank",
    "load_image",
    "log_density",
    "nrq_score",
    "psnr",
    "resize_bilinear",
    "run_protocol",
    "save_bank",
    "save_png",
    "severity_sweep",
    "spearman",
    "structural_distance",
    "tile",
    "token_loss",
    "ulpips",
    "wilson_ci",
]
