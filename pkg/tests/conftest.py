import numpy as np
import pytest
from scipy import ndimage

from usqm.features import BuiltinEncoder
from usqm.image import GrayImage


def speckle_phantom(
    seed: int,
    h: int = 224,
    w: int = 224,
    grain: float = 2.0,
    smooth: float = 16.0,
    floor: float = 0.12,
    gain: float = 0.75,
) -> GrayImage:
    """Synthetic tissue-like texture: smooth background times granular field."""
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=smooth)
    lo, hi = base.min(), base.max()
    base = (base - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)
    grain_field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=grain)
    grain_field /= max(float(grain_field.std()), 1e-12)
    return GrayImage(np.clip(floor + gain * base * (1.0 + 0.35 * grain_field), 0.0, 1.0))


ORGAN_STYLES = {
    "fine": dict(grain=1.2, smooth=10.0, floor=0.10, gain=0.75),
    "coarse": dict(grain=4.5, smooth=28.0, floor=0.25, gain=0.65),
}


def organ_phantom(organ: str, seed: int, h: int = 224, w: int = 224) -> GrayImage:
    return speckle_phantom(seed, h=h, w=w, **ORGAN_STYLES[organ])


@pytest.fixture(scope="session")
def encoder():
    return BuiltinEncoder()
