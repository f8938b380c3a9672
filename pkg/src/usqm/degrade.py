"""Distortion synthesis and binary-search PSNR calibration.

Eight distortion kinds in four groups (noise/texture, blur/resolution,
acquisition-specific structural artifacts, geometric deformation), plus an
optional low-frequency haze kind. Every kind is deterministic for a fixed
seed: stochastic kinds draw one frozen noise field from the seed and scale
it by severity, which makes PSNR a function of severity and keeps the
bisection well-posed. Severity theta = theta_min is the identity for every
kind, and PSNR is nonincreasing in theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import MonotonicityError, ParameterError, UnreachableTargetError
from .image import GrayImage, _resize_array, psnr

DEFAULT_KINDS = (
    "additive-gaussian",
    "speckle",
    "gaussian-blur",
    "downsample",
    "roi-shadow",
    "specular-clip",
    "scanline-missing",
    "elastic",
)
OPTIONAL_KINDS = ("clutter-haze",)

_GROUPS = {
    "additive-gaussian": "noise-texture",
    "speckle": "noise-texture",
    "gaussian-blur": "blur-resolution",
    "downsample": "blur-resolution",
    "roi-shadow": "structural-artifact",
    "specular-clip": "structural-artifact",
    "scanline-missing": "structural-artifact",
    "elastic": "geometric",
    "clutter-haze": "structural-artifact",
}

_THETA_BOUNDS = {
    "additive-gaussian": (0.0, 0.5),
    "speckle": (0.0, 1.5),
    "gaussian-blur": (0.0, 8.0),
    "downsample": (1.0, 16.0),
    "roi-shadow": (0.0, 1.0),
    "specular-clip": (0.0, 1.0),
    "scanline-missing": (0.0, 1.0),
    "elastic": (0.0, 10.0),
    "clutter-haze": (0.0, 0.8),
}

_KIND_IDS = {k: i for i, k in enumerate(DEFAULT_KINDS + OPTIONAL_KINDS)}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    theta: float
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KIND_IDS:
            raise ParameterError(f"unknown distortion kind {self.kind!r}")
        lo, hi = _THETA_BOUNDS[self.kind]
        if not lo <= self.theta <= hi:
            raise ParameterError(
                f"{self.kind}: theta {self.theta} outside [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class PsnrTarget:
    target: float
    tolerance: float = 0.05
    max_iterations: int = 48

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ParameterError(f"tolerance must be > 0, got {self.tolerance}")


@dataclass(frozen=True)
class CalibrationResult:
    theta: float
    achieved_psnr: float
    image: GrayImage
    converged: bool
    iterations: int


def kind_group(kind: str) -> str:
    if kind not in _GROUPS:
        raise ParameterError(f"unknown distortion kind {kind!r}")
    return _GROUPS[kind]


def theta_bounds(kind: str) -> tuple[float, float]:
    if kind not in _THETA_BOUNDS:
        raise ParameterError(f"unknown distortion kind {kind!r}")
    return _THETA_BOUNDS[kind]


def _kind_rng(kind: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _KIND_IDS[kind]])


def _additive_gaussian(x, theta, rng, params):
    noise = rng.standard_normal(x.shape)
    return x + theta * noise


def _speckle(x, theta, rng, params):
    noise = rng.standard_normal(x.shape)
    return x * (1.0 + theta * noise)


def _gaussian_blur(x, theta, rng, params):
    if theta == 0.0:
        return x
    return ndimage.gaussian_filter(x, sigma=theta, mode="nearest")


def _axis_down_up(x: np.ndarray, axis: int, factor: float) -> np.ndarray:
    # blend reconstructions at the two integer grid sizes bracketing the
    # fractional target so PSNR varies continuously with the factor;
    # applied separably per axis to stay continuous on non-square images
    n = x.shape[axis]
    target = n / factor
    n0 = max(1, math.ceil(target))
    n1 = max(1, n0 - 1)

    def down_up(size):
        if size == n:
            return x
        if axis == 0:
            return _resize_array(_resize_array(x, size, x.shape[1]), n, x.shape[1])
        return _resize_array(_resize_array(x, x.shape[0], size), x.shape[0], n)

    frac = n0 - target  # 0 when the target size is exactly integral
    a = down_up(n0)
    if frac <= 0 or n1 == n0:
        return a
    return (1.0 - frac) * a + frac * down_up(n1)


def _downsample(x, theta, rng, params):
    return _axis_down_up(_axis_down_up(x, 0, theta), 1, theta)


def _roi_shadow(x, theta, rng, params):
    h, w = x.shape
    center = params.get("center_frac")
    if center is None:
        center = (rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65))
    ay, ax = params.get("axes_frac", (0.25, 0.25))
    cy, cx = center[0] * (h - 1), center[1] * (w - 1)
    yy = (np.arange(h)[:, None] - cy) / (ay * h)
    xx = (np.arange(w)[None, :] - cx) / (ax * w)
    rho = np.sqrt(yy**2 + xx**2)
    inner, outer = 0.7, 1.0
    ramp = np.clip((rho - inner) / (outer - inner), 0.0, 1.0)
    weight = 0.5 * (1.0 + np.cos(np.pi * ramp))
    return x * (1.0 - theta * weight)


def _specular_clip(x, theta, rng, params):
    return np.where(x >= 1.0 - theta, 1.0, x)


def _scanline_missing(x, theta, rng, params):
    h, w = x.shape
    perm = rng.permutation(w)
    exact = theta * w
    full = int(math.floor(exact + 1e-9))
    frac = max(0.0, exact - full)
    out = x.copy()
    out[:, perm[:full]] = 0.0
    # partially attenuate the next column in the frozen order so PSNR is
    # continuous in theta (required by the PSNR-matching search)
    if frac > 0 and full < w:
        out[:, perm[full]] *= 1.0 - frac
    return out


def _elastic(x, theta, rng, params):
    if theta == 0.0:
        return x
    h, w = x.shape
    sigma = params.get("field_sigma", 14.0)
    dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="reflect")
    rms = math.sqrt(float(np.mean(dy**2 + dx**2)))
    if rms > 0:
        dy, dx = dy / rms, dx / rms
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy - theta * dy, xx - theta * dx])
    return ndimage.map_coordinates(x, coords, order=1, mode="nearest")


def _clutter_haze(x, theta, rng, params):
    field_ = ndimage.gaussian_filter(rng.standard_normal(x.shape), sigma=20.0, mode="reflect")
    lo, hi = field_.min(), field_.max()
    haze = (field_ - lo) / (hi - lo) if hi > lo else np.zeros_like(field_)
    return x + theta * haze


_APPLY = {
    "additive-gaussian": _additive_gaussian,
    "speckle": _speckle,
    "gaussian-blur": _gaussian_blur,
    "downsample": _downsample,
    "roi-shadow": _roi_shadow,
    "specular-clip": _specular_clip,
    "scanline-missing": _scanline_missing,
    "elastic": _elastic,
    "clutter-haze": _clutter_haze,
}


def apply(img: GrayImage, spec: DegradationSpec) -> GrayImage:
    """Apply one distortion; same dimensions, clamped to [0,1], deterministic."""
    rng = _kind_rng(spec.kind, spec.seed)
    out = _APPLY[spec.kind](img.data, float(spec.theta), rng, spec.params)
    return GrayImage(np.clip(out, 0.0, 1.0))


def calibrate_to_psnr(
    img: GrayImage, kind: str, seed: int, target: PsnrTarget, params: dict | None = None
) -> CalibrationResult:
    """Bisection on severity until the distorted image hits the PSNR target.

    The same seed is reused at every probe (the noise field is frozen), so
    PSNR is a nonincreasing function of severity and pure bisection
    converges. Raises UnreachableTargetError when the target is outside
    the achievable range for this (image, kind, seed).
    """
    params = params or {}
    lo, hi = theta_bounds(kind)

    def probe(theta: float) -> tuple[float, GrayImage]:
        out = apply(img, DegradationSpec(kind=kind, theta=theta, seed=seed, params=params))
        return psnr(img, out), out

    p_max, img_max = probe(hi)
    if not math.isfinite(target.target) or target.target > 1e6:
        raise UnreachableTargetError(
            f"{kind}: target must be a finite dB value; achievable range is ({p_max:.3f}, inf) dB"
        )
    if abs(p_max - target.target) <= target.tolerance:
        return CalibrationResult(hi, p_max, img_max, True, 1)
    if p_max > target.target:
        raise UnreachableTargetError(
            f"{kind}: target {target.target:.3f} dB below reach; achievable range is "
            f"({p_max:.3f}, inf) dB at seed {seed}"
        )

    best = (abs(p_max - target.target), hi, p_max, img_max)
    t_lo, t_hi = lo, hi
    iterations = 1  # the theta_max probe
    while iterations < target.max_iterations:
        mid = 0.5 * (t_lo + t_hi)
        p, out = probe(mid)
        iterations += 1
        gap = abs(p - target.target)
        if gap < best[0]:
            best = (gap, mid, p, out)
        if gap <= target.tolerance:
            return CalibrationResult(mid, p, out, True, iterations)
        if p > target.target:
            t_lo = mid
        else:
            t_hi = mid
    _, theta, p, out = best
    return CalibrationResult(theta, p, out, False, iterations)


def severity_sweep(
    img: GrayImage, kind: str, seed: int, n: int, params: dict | None = None
) -> list[tuple[float, GrayImage]]:
    """n variants at strictly increasing severity spanning the full range.

    Verifies that PSNR is nonincreasing along the sweep; a violation is a
    distortion-implementation bug and raises MonotonicityError.
    """
    if n < 2:
        raise ParameterError(f"sweep needs n >= 2, got {n}")
    params = params or {}
    lo, hi = theta_bounds(kind)
    thetas = np.linspace(lo, hi, n)
    out = []
    prev_psnr = math.inf
    for theta in thetas:
        deg = apply(img, DegradationSpec(kind=kind, theta=float(theta), seed=seed, params=params))
        p = psnr(img, deg)
        if p > prev_psnr + 1e-9:
            raise MonotonicityError(
                f"{kind}: PSNR rose from {prev_psnr:.6f} to {p:.6f} dB at theta={theta:.6f}"
            )
        prev_psnr = p
        out.append((float(theta), deg))
    return out
