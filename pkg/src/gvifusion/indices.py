"""The thirteen NRGB vegetation indices, VCI dataset statistics and pixel correlations.

Formulas follow the published table literally, including the less common
forms of RVI (R / NIR), VCI (divided by max + min), VDVI (leading factor 2)
and MCARI. Every denominator ``d`` is replaced by ``sign(d) * max(|d|, eps)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from gvifusion.diffcore import clip_denominator
from gvifusion.raster import NrgbImage


class ViError(ValueError):
    """Bad index parameters or missing dataset statistics."""


class ViKind(enum.Enum):
    NDVI = "ndvi"
    IAVI = "iavi"
    MSAVI2 = "msavi2"
    EVI = "evi"
    VDVI = "vdvi"
    WDRVI = "wdrvi"
    MCARI = "mcari"
    GDVI = "gdvi"
    SAVI = "savi"
    RVI = "rvi"
    VCI = "vci"
    GRVI = "grvi"
    NDGI = "ndgi"

    @classmethod
    def parse(cls, name) -> "ViKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ViError(f"unknown vegetation index {name!r}") from None


ALL_KINDS = tuple(ViKind)
# IAVI depends on a free gamma and is left out of the fused input stack.
FUSION_KINDS = tuple(k for k in ALL_KINDS if k is not ViKind.IAVI)


@dataclass(frozen=True)
class ViParams:
    gamma: float = 0.9
    L: float = 0.5
    ndvi_min: float | None = None
    ndvi_max: float | None = None
    clip_eps: float = 1e-6

    def __post_init__(self):
        if not 0.65 < self.gamma < 1.12:
            raise ViError(f"gamma must lie in (0.65, 1.12), got {self.gamma}")
        if self.L not in (0.0, 0.5, 1.0):
            raise ViError(f"L must be one of 0, 0.5, 1, got {self.L}")
        if not self.clip_eps > 0:
            raise ViError(f"clip_eps must be positive, got {self.clip_eps}")
        if (self.ndvi_min is None) != (self.ndvi_max is None):
            raise ViError("ndvi_min and ndvi_max must be given together")
        if self.ndvi_min is not None and self.ndvi_min > self.ndvi_max:
            raise ViError(f"ndvi_min {self.ndvi_min} exceeds ndvi_max {self.ndvi_max}")

    @property
    def has_vci_stats(self) -> bool:
        return self.ndvi_min is not None

    def with_vci_stats(self, ndvi_min, ndvi_max) -> "ViParams":
        return ViParams(self.gamma, self.L, float(ndvi_min), float(ndvi_max), self.clip_eps)


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    low_closed: bool = True
    high_closed: bool = True

    def __contains__(self, value) -> bool:
        lo_ok = value >= self.low if self.low_closed else value > self.low
        hi_ok = value <= self.high if self.high_closed else value < self.high
        return bool(lo_ok and hi_ok)

    def __str__(self):
        lo = f"[{self.low:g}" if self.low_closed else f"({self.low:g}"
        hi = f"{self.high:g}]" if self.high_closed else f"{self.high:g})"
        return f"{lo}, {hi}"

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.low) and math.isfinite(self.high)


_INF = math.inf
_RANGES = {
    ViKind.NDVI: Interval(0.0, 1.0),
    ViKind.IAVI: Interval(-1.0, 1.0),
    ViKind.MSAVI2: Interval(0.0, 1.0),
    ViKind.EVI: Interval(-_INF, _INF, False, False),
    ViKind.VDVI: Interval(-1.0, 1.0),
    ViKind.WDRVI: Interval(-1.0, 1.0),
    ViKind.MCARI: Interval(-1.6, 4.88, False, False),
    ViKind.GDVI: Interval(-1.0, 1.0),
    ViKind.SAVI: Interval(0.0, 1.0),
    ViKind.RVI: Interval(0.0, _INF, True, False),
    ViKind.VCI: Interval(0.0, 1.0),
    ViKind.GRVI: Interval(0.0, _INF, True, False),
    ViKind.NDGI: Interval(-1.0, 1.0),
}


def meaningful_range(kind) -> Interval:
    """Interpretable value range of an index. Metadata only; nothing is clamped to it."""
    return _RANGES[ViKind.parse(kind)]


@dataclass(frozen=True)
class ViRaster:
    kind: ViKind
    values: np.ndarray
    valid_mask: np.ndarray


def vi_from_bands(kind, nir, red, green, blue, params: ViParams = ViParams()) -> np.ndarray:
    """Evaluate one index on arbitrary same-shaped band arrays."""
    kind = ViKind.parse(kind)
    n, r, g, b = (np.asarray(a, dtype=np.float64) for a in (nir, red, green, blue))
    eps = params.clip_eps

    def div(num, den):
        return num / clip_denominator(den, eps)

    if kind is ViKind.NDVI:
        return div(n - r, n + r)
    if kind is ViKind.IAVI:
        rb = r - params.gamma * (b - r)
        return div(n - rb, n + rb)
    if kind is ViKind.MSAVI2:
        a = 2.0 * n + 1.0
        # radicand equals (2N - 1)^2 + 8R, nonnegative on reflectances
        return 0.5 * (a - np.sqrt(np.maximum(a * a - 8.0 * (n - r), 0.0)))
    if kind is ViKind.EVI:
        return 2.5 * div(n - r, n + 6.0 * r - 7.5 * b + 1.0)
    if kind is ViKind.VDVI:
        return 2.0 * div(2.0 * g - r - b, 2.0 * g + r + b)
    if kind is ViKind.WDRVI:
        return div(0.2 * n - r, 0.2 * n + r)
    if kind is ViKind.MCARI:
        a = 2.0 * n + 1.0
        num = 1.5 * (2.5 * (n - r) - 1.3 * (n - g))
        den = np.sqrt(np.maximum(a * a - (6.0 * n - 5.0 * r) - 0.5, 0.0))
        return div(num, den)
    if kind is ViKind.GDVI:
        return n - g
    if kind is ViKind.SAVI:
        L = params.L
        return (1.0 + L) * div(n - r, n + r + L)
    if kind is ViKind.RVI:
        return div(r, n)
    if kind is ViKind.VCI:
        if not params.has_vci_stats:
            raise ViError("VCI needs dataset NDVI extrema (ndvi_min, ndvi_max)")
        ndvi = div(n - r, n + r)
        return div(ndvi - params.ndvi_min, params.ndvi_max + params.ndvi_min)
    if kind is ViKind.GRVI:
        return div(n, g)
    if kind is ViKind.NDGI:
        return div(g - r, g + r)
    raise ViError(f"unhandled index {kind}")  # pragma: no cover


def compute_vi(kind, image: NrgbImage, params: ViParams = ViParams()) -> ViRaster:
    kind = ViKind.parse(kind)
    values = vi_from_bands(kind, image.nir, image.red, image.green, image.blue, params)
    return ViRaster(kind, values, image.valid_mask)


def compute_all(image: NrgbImage, params: ViParams) -> list[ViRaster]:
    """The twelve fusion indices (all but IAVI) in canonical order."""
    if not params.has_vci_stats:
        raise ViError("compute_all includes VCI and needs ndvi_min/ndvi_max")
    return [compute_vi(k, image, params) for k in FUSION_KINDS]


def vci_stats(dataset, params: ViParams = ViParams()) -> tuple[float, float]:
    """NDVI extrema over every valid pixel of every image."""
    dataset = list(dataset)
    if not dataset:
        raise ViError("vci_stats needs at least one image")
    lo, hi = math.inf, -math.inf
    for image in dataset:
        ndvi = compute_vi(ViKind.NDVI, image, params).values[image.valid_mask]
        if ndvi.size:
            lo = min(lo, float(ndvi.min()))
            hi = max(hi, float(ndvi.max()))
    if lo > hi:
        raise ViError("dataset has no valid pixels")
    return lo, hi


def pearson_matrix(samples: np.ndarray) -> np.ndarray:
    """Pearson correlation between the rows of ``samples`` (k variables x n observations).

    Rows with zero variance yield NaN for their whole row and column, diagonal included.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ViError("need at least two observations per variable")
    centered = x - x.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", centered, centered)
    cov = centered @ centered.T
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.sqrt(ss)
        corr = cov / np.outer(norm, norm)
    constant = ss <= (1e-14 * x.shape[1]) * np.maximum(1.0, np.abs(x).max(axis=1)) ** 2
    corr = np.clip(corr, -1.0, 1.0)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    corr[constant, :] = np.nan
    corr[:, constant] = np.nan
    return corr


def correlation_matrix(rasters, mask=None) -> np.ndarray:
    """Pixel-level Pearson matrix over the valid pixels shared by ``rasters``.

    Entries involving a raster that is constant on the valid pixels are NaN.
    """
    rasters = list(rasters)
    if not rasters:
        raise ViError("no rasters given")
    shape = rasters[0].values.shape
    if any(r.values.shape != shape for r in rasters):
        raise ViError("rasters differ in shape")
    if mask is None:
        mask = rasters[0].valid_mask
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 2:
        raise ViError("correlation needs at least two valid pixels")
    return pearson_matrix(np.stack([r.values[mask] for r in rasters]))
