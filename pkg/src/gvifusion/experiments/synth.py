"""Synthetic NRGB scenes whose labels are driven by latent vegetation and water.

Each scene mixes soil, vegetation and water spectra according to smooth random
fields, then multiplies by a per-image gain and a smooth shading field. Labels
depend on the NDVI of the land cover (a band ratio, so unaffected by gain and
shading) and on the water fraction; where both fire the pixel carries two
labels. Some images get a rectangular block of invalid pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from gvifusion.metrics import LabelGrid
from gvifusion.raster import NrgbImage

CLASS_NAMES = ("background", "weed_cluster", "waterway")

# NIR, R, G, B reflectances
SOIL = np.array([0.32, 0.26, 0.21, 0.16])
VEGETATION = np.array([0.55, 0.05, 0.11, 0.04])
WATER = np.array([0.04, 0.05, 0.07, 0.09])


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 200
    size: int = 64
    seed: int = 0
    rule: str = "vegetation"  # or "threshold": labels from raw NIR levels
    smoothness: float = 5.0
    gain_range: tuple = (0.6, 1.0)
    shading: float = 0.35
    noise_std: float = 0.01
    weed_threshold: float = 0.5
    label_noise: float = 0.05
    water_threshold: float = 0.85
    invalid_prob: float = 0.5

    def __post_init__(self):
        if self.n_images < 1 or self.size < 4:
            raise ValueError("need at least one image of size >= 4")
        if self.rule not in ("vegetation", "threshold"):
            raise ValueError(f"unknown class rule {self.rule!r}")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ValueError("gain_range must be positive and ordered")


def _field(rng, size, sigma):
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _invalid_block(rng, size, prob):
    valid = np.ones((size, size), dtype=bool)
    if rng.random() < prob:
        h, w = rng.integers(size // 8, size // 3 + 1, size=2)
        r0, c0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        valid[r0:r0 + h, c0:c0 + w] = False
    return valid


def _vegetation_scene(spec: SynthSpec, rng):
    n = spec.size
    veg = _sigmoid(2.5 * _field(rng, n, spec.smoothness) + rng.normal(0.0, 0.5))
    water = _sigmoid(6.0 * (_field(rng, n, spec.smoothness * 1.5) - 1.2))
    soil_tone = 1.0 + 0.25 * _field(rng, n, spec.smoothness * 2)

    land = veg[None] * VEGETATION[:, None, None] + (1.0 - veg[None]) * (
        soil_tone[None] * SOIL[:, None, None])
    refl = (1.0 - water[None]) * land + water[None] * WATER[:, None, None]

    gain = rng.uniform(*spec.gain_range)
    shade = 1.0 - spec.shading * _sigmoid(1.5 * _field(rng, n, spec.smoothness * 3))
    obs = gain * shade[None] * refl + rng.normal(0.0, spec.noise_std, refl.shape)
    obs = np.clip(obs, 0.002, 1.0)

    land_ndvi = (land[0] - land[1]) / (land[0] + land[1])
    weed = land_ndvi + rng.normal(0.0, spec.label_noise, land_ndvi.shape) > spec.weed_threshold
    waterway = water > spec.water_threshold
    labels = np.stack([~(weed | waterway), weed, waterway])
    return obs, labels


def _threshold_scene(spec: SynthSpec, rng):
    n = spec.size
    planes = np.stack([_sigmoid(1.8 * _field(rng, n, spec.smoothness)) for _ in range(4)])
    nir = planes[0]
    high = nir > 0.6
    low = nir < 0.3
    labels = np.stack([~(high | low), high, low])
    return planes, labels


def synth_dataset(spec: SynthSpec):
    """Deterministic list of images and matching label grids for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    images, grids = [], []
    for _ in range(spec.n_images):
        if spec.rule == "vegetation":
            planes, labels = _vegetation_scene(spec, rng)
        else:
            planes, labels = _threshold_scene(spec, rng)
        valid = _invalid_block(rng, spec.size, spec.invalid_prob)
        images.append(NrgbImage(planes, valid))
        grids.append(LabelGrid(labels, valid))
    return images, grids


def sample_pixels(images, n_pixels: int, seed=0) -> np.ndarray:
    """Draw ``n_pixels`` valid pixels (with replacement across images) as an ``[n, 4]`` array."""
    rng = np.random.default_rng(seed)
    pool = np.concatenate([im.planes[:, im.valid_mask].T for im in images])
    return pool[rng.integers(0, len(pool), n_pixels)]
