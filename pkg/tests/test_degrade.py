import math

import numpy as np
import pytest
from conftest import speckle_phantom

from usqm.degrade import (
    DEFAULT_KINDS,
    OPTIONAL_KINDS,
    DegradationSpec,
    PsnrTarget,
    apply,
    calibrate_to_psnr,
    kind_group,
    severity_sweep,
    theta_bounds,
)
from usqm.errors import ParameterError, UnreachableTargetError
from usqm.image import GrayImage, psnr

ALL_KINDS = DEFAULT_KINDS + OPTIONAL_KINDS


@pytest.fixture(scope="module")
def phantom():
    return speckle_phantom(77)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_theta_min_is_identity(kind, phantom):
    lo, _ = theta_bounds(kind)
    out = apply(phantom, DegradationSpec(kind=kind, theta=lo, seed=3))
    np.testing.assert_array_equal(out.data, phantom.data)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_deterministic_for_fixed_seed(kind, phantom):
    lo, hi = theta_bounds(kind)
    theta = lo + 0.4 * (hi - lo)
    a = apply(phantom, DegradationSpec(kind=kind, theta=theta, seed=9))
    b = apply(phantom, DegradationSpec(kind=kind, theta=theta, seed=9))
    assert np.array_equal(a.data, b.data)
    c = apply(phantom, DegradationSpec(kind=kind, theta=theta, seed=10))
    if kind not in ("gaussian-blur", "downsample", "specular-clip"):  # seeded kinds only
        assert not np.array_equal(a.data, c.data)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_output_in_range_and_same_shape(kind, phantom):
    _, hi = theta_bounds(kind)
    out = apply(phantom, DegradationSpec(kind=kind, theta=hi, seed=1))
    assert out.shape == phantom.shape
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_scanline_counts_and_reproducibility():
    img = GrayImage(np.full((64, 224), 0.7))
    out = apply(img, DegradationSpec(kind="scanline-missing", theta=0.25, seed=12))
    zeroed = np.where(np.all(out.data == 0.0, axis=0))[0]
    assert len(zeroed) == round(0.25 * 224) == 56
    out2 = apply(img, DegradationSpec(kind="scanline-missing", theta=0.25, seed=12))
    zeroed2 = np.where(np.all(out2.data == 0.0, axis=0))[0]
    assert np.array_equal(zeroed, zeroed2)


def test_specular_clip_definition(phantom):
    theta = 0.3
    out = apply(phantom, DegradationSpec(kind="specular-clip", theta=theta, seed=0))
    hi_mask = phantom.data >= 1.0 - theta
    assert np.all(out.data[hi_mask] == 1.0)
    np.testing.assert_array_equal(out.data[~hi_mask], phantom.data[~hi_mask])


def test_theta_out_of_range():
    with pytest.raises(ParameterError):
        DegradationSpec(kind="speckle", theta=99.0, seed=0)
    with pytest.raises(ParameterError):
        DegradationSpec(kind="downsample", theta=0.5, seed=0)
    with pytest.raises(ParameterError):
        DegradationSpec(kind="nonsense", theta=0.1, seed=0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_psnr_monotone_on_dense_grid(kind, phantom):
    lo, hi = theta_bounds(kind)
    prev = math.inf
    for theta in np.linspace(lo, hi, 12):
        out = apply(phantom, DegradationSpec(kind=kind, theta=float(theta), seed=4))
        p = psnr(phantom, out)
        assert p <= prev + 1e-9, f"{kind}: PSNR rose at theta={theta}"
        prev = p


def test_calibrate_additive_gaussian_closed_form():
    img = GrayImage(np.full((224, 224), 0.5))
    result = calibrate_to_psnr(img, "additive-gaussian", seed=21, target=PsnrTarget(20.0))
    assert result.converged
    assert 19.95 <= result.achieved_psnr <= 20.05
    # on a constant mid-gray image, 20 dB needs roughly sigma = 0.1
    assert 0.09 <= result.theta <= 0.11


def test_calibrate_deterministic(phantom):
    a = calibrate_to_psnr(phantom, "speckle", seed=5, target=PsnrTarget(22.0))
    b = calibrate_to_psnr(phantom, "speckle", seed=5, target=PsnrTarget(22.0))
    assert a.theta == b.theta
    assert np.array_equal(a.image.data, b.image.data)


def test_calibrate_unreachable_target(phantom):
    with pytest.raises(UnreachableTargetError, match="achievable range"):
        calibrate_to_psnr(phantom, "roi-shadow", seed=1, target=PsnrTarget(3.0))
    with pytest.raises(UnreachableTargetError):
        calibrate_to_psnr(phantom, "speckle", seed=1, target=PsnrTarget(math.inf))


def test_sweep_basic(phantom):
    variants = severity_sweep(phantom, "additive-gaussian", seed=2, n=6)
    thetas = [t for t, _ in variants]
    assert len(variants) == 6
    assert all(b > a for a, b in zip(thetas, thetas[1:]))
    lo, hi = theta_bounds("additive-gaussian")
    assert thetas[0] == lo and thetas[-1] == hi
    np.testing.assert_array_equal(variants[0][1].data, phantom.data)


def test_sweep_two_points_hits_endpoints(phantom):
    variants = severity_sweep(phantom, "gaussian-blur", seed=2, n=2)
    lo, hi = theta_bounds("gaussian-blur")
    assert [t for t, _ in variants] == [lo, hi]


def test_sweep_needs_two(phantom):
    with pytest.raises(ParameterError):
        severity_sweep(phantom, "speckle", seed=0, n=1)


def test_groups_partition_the_default_kinds():
    groups = {}
    for kind in DEFAULT_KINDS:
        groups.setdefault(kind_group(kind), []).append(kind)
    assert groups == {
        "noise-texture": ["additive-gaussian", "speckle"],
        "blur-resolution": ["gaussian-blur", "downsample"],
        "structural-artifact": ["roi-shadow", "specular-clip", "scanline-missing"],
        "geometric": ["elastic"],
    }
    assert "clutter-haze" not in DEFAULT_KINDS
    assert kind_group("clutter-haze") == "structural-artifact"


def test_roi_shadow_pinned_center():
    img = speckle_phantom(5)
    spec = DegradationSpec(
        kind="roi-shadow",
        theta=1.0,
        seed=0,
        params={"center_frac": (0.5, 0.5), "axes_frac": (0.2, 0.2)},
    )
    out = apply(img, spec)
    assert out.data[112, 112] == 0.0  # fully shadowed at the pinned center
    np.testing.assert_array_equal(out.data[0, :], img.data[0, :])  # far corner untouched
