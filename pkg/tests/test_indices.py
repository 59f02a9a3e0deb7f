import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gvifusion.indices import (
    ALL_KINDS, FUSION_KINDS, ViError, ViKind, ViParams, compute_all, compute_vi,
    correlation_matrix, meaningful_range, pearson_matrix, vci_stats, vi_from_bands,
)
from gvifusion.raster import NrgbImage

from conftest import random_image


def px(kind, nir=0.5, red=0.5, green=0.5, blue=0.5, **kw):
    return float(vi_from_bands(kind, nir, red, green, blue, ViParams(**kw)))


def test_table_order_and_count():
    assert [k.name for k in ALL_KINDS] == [
        "NDVI", "IAVI", "MSAVI2", "EVI", "VDVI", "WDRVI", "MCARI", "GDVI", "SAVI", "RVI",
        "VCI", "GRVI", "NDGI"]
    assert len(FUSION_KINDS) == 12 and ViKind.IAVI not in FUSION_KINDS
    assert ViKind.parse("ndvi") is ViKind.NDVI
    with pytest.raises(ViError):
        ViKind.parse("xyz")


def test_frozen_scalar_values():
    assert px("ndvi", 0.3, 0.3) == 0.0
    assert px("ndvi", 0.8, 0.2) == pytest.approx(0.6, abs=1e-15)
    assert px("savi", 0.8, 0.2) == pytest.approx(0.6, abs=1e-15)
    assert px("evi", 0.8, 0.2, blue=0.1) == pytest.approx(2.5 * 0.6 / 2.25, abs=1e-15)
    assert px("evi", 0.8, 0.2, blue=0.1) == pytest.approx(0.6667, abs=1e-4)
    assert px("msavi2", 0.4, 0.4) == pytest.approx(0.0, abs=1e-15)
    assert px("iavi", 0.6, 0.2, blue=0.2, gamma=1.0) == pytest.approx(0.5, abs=1e-15)
    assert px("rvi", 0.4, 0.2) == pytest.approx(0.5, abs=1e-15)
    # NDVI of 0.5 from NIR=0.75, R=0.25
    assert px("vci", 0.75, 0.25, ndvi_min=0.0, ndvi_max=1.0) == pytest.approx(0.5, abs=1e-15)


def test_printed_forms_differ_from_textbook():
    # VCI divides by (max + min), VDVI carries a factor 2
    assert px("vci", 0.75, 0.25, ndvi_min=0.25, ndvi_max=0.75) == pytest.approx(0.25)
    assert px("vdvi", green=0.5, red=0.25, blue=0.25) == pytest.approx(2 * 0.5 / 1.5)


def test_parameter_validation():
    for bad in (dict(gamma=0.5), dict(gamma=1.2), dict(L=0.3), dict(clip_eps=0.0),
                dict(ndvi_min=0.5, ndvi_max=0.1), dict(ndvi_min=0.1)):
        with pytest.raises(ViError):
            ViParams(**bad)
    with pytest.raises(ViError, match="VCI"):
        px("vci", 0.8, 0.2)


def test_meaningful_ranges():
    assert (meaningful_range("ndvi").low, meaningful_range("ndvi").high) == (0.0, 1.0)
    evi = meaningful_range("evi")
    assert evi.low == -math.inf and evi.high == math.inf and not evi.bounded
    mcari = meaningful_range("mcari")
    assert (mcari.low, mcari.high) == (-1.6, 4.88)
    assert 4.88 not in mcari and -1.6 not in mcari and 0.0 in mcari
    assert 1.0 in meaningful_range("ndvi")


def test_clipping_keeps_values_finite_and_sign():
    p = ViParams(clip_eps=1e-6)
    assert float(vi_from_bands("rvi", 0.0, 0.2, 0, 0, p)) == pytest.approx(0.2 / 1e-6)
    assert float(vi_from_bands("ndgi", 0.0, 0.0, 0.0, 0.0, p)) == 0.0
    # denominator -5e-7 is clipped to -1e-6, keeping its sign
    v = float(vi_from_bands("evi", 0.0, 0.0, 0.0, (1.0 + 5e-7) / 7.5, p))
    assert v == 0.0
    v = float(vi_from_bands("ndvi", 1e-7, -2e-7, 0, 0, p))
    assert v == pytest.approx(3e-7 / -1e-6)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4))
def test_all_indices_finite_on_reflectances(bands):
    params = ViParams(ndvi_min=-0.2, ndvi_max=0.9)
    for kind in ALL_KINDS:
        assert np.isfinite(vi_from_bands(kind, *bands, params))


def test_compute_all_and_constant_image():
    im = NrgbImage(np.full((4, 3, 3), 0.4), np.ones((3, 3), bool))
    out = compute_all(im, ViParams(ndvi_min=0.0, ndvi_max=1.0))
    assert [r.kind for r in out] == list(FUSION_KINDS)
    for r in out:
        if r.kind in (ViKind.NDVI, ViKind.NDGI, ViKind.WDRVI):
            # WDRVI is 0.2N - R over 0.2N + R, not symmetric
            if r.kind is ViKind.WDRVI:
                assert np.allclose(r.values, (0.08 - 0.4) / (0.08 + 0.4))
            else:
                assert np.all(r.values == 0.0)


def test_vci_stats(rng):
    im = NrgbImage.from_planes([[0.5, 0.8]], [[0.5, 0.2]], [[0.1, 0.1]], [[0.1, 0.1]])
    lo, hi = vci_stats([im])
    assert (lo, hi) == (0.0, pytest.approx(0.6))
    a, b = random_image(rng, invalid=0.3), random_image(rng, invalid=0.3)
    lo, hi = vci_stats([a, b])
    ndvi = np.concatenate([((x.nir - x.red) / (x.nir + x.red))[x.valid_mask] for x in (a, b)])
    assert (lo, hi) == (ndvi.min(), ndvi.max())
    same = vci_stats([a, a])
    assert same == vci_stats([a])
    with pytest.raises(ViError):
        vci_stats([])
    with pytest.raises(ViError):
        vci_stats([NrgbImage(a.planes, np.zeros_like(a.valid_mask))])


def test_correlation_properties(rng):
    im = random_image(rng, h=10, w=10)
    r = compute_vi("ndvi", im)
    x = r.values.ravel()
    m = pearson_matrix(np.stack([x, x, -x]))
    assert m[0, 1] == pytest.approx(1.0) and m[0, 2] == pytest.approx(-1.0)
    rasters = compute_all(im, ViParams().with_vci_stats(*vci_stats([im])))
    c = correlation_matrix(rasters)
    assert c.shape == (12, 12)
    assert np.array_equal(c, c.T) and np.all(np.diag(c) == 1.0)
    assert np.all(np.abs(c) <= 1.0)
    # brute-force Pearson oracle
    a, b = rasters[0].values.ravel(), rasters[8].values.ravel()
    assert c[0, 8] == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_constant_raster_gives_undefined_correlation():
    m = pearson_matrix(np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]))
    assert np.isnan(m[0, 1]) and np.isnan(m[1, 0]) and m[0, 0] == 1.0
