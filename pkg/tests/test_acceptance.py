"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The segmentation-ordering check trains 9 networks and takes several minutes.
"""
import csv
import math
import time

import numpy as np
import pytest

from gvifusion import cli, gradcheck, norm
from gvifusion.experiments import segmentation as seg
from gvifusion.experiments.fit import FitConfig, fit_vi_experiment, pixel_data
from gvifusion.experiments.synth import SynthSpec, synth_dataset
from gvifusion.gvi import EXPRESSIBLE_KINDS, express_vi, gvi_forward, layer_from_vi
from gvifusion.diffcore import conv2d_forward
from gvifusion.indices import (
    ALL_KINDS, FUSION_KINDS, ViError, ViKind, ViParams, compute_all, compute_vi,
    correlation_matrix, vci_stats,
)
from gvifusion.metrics import miou_overlapped
from gvifusion.norm import NormState
from gvifusion.raster import NrgbImage

from conftest import random_image, record_acceptance, write_dataset


# ------------------------------------------------------------------ 1

def test_gradient_suite():
    start = time.perf_counter()
    report = gradcheck.run_suite(seed=0, n_points=100, h=1e-5)
    elapsed = time.perf_counter() - start
    worst_name, worst, _ = max(report, key=lambda r: r[1])
    ok = worst < 1e-4 and elapsed < 60 and len(report) == len(gradcheck.CASES)
    record_acceptance(1, ok, f"gradient suite over {len(report)} ops, worst {worst:.2e} "
                             f"({worst_name}) < 1e-4, {elapsed:.1f}s < 60s")
    assert ok


# ------------------------------------------------------------------ 2

def _clip(d, eps=1e-6):
    return math.copysign(max(abs(d), eps), d) if d != 0 else eps


def scalar_vi(kind, n, r, g, b, gamma=0.9, L=0.5, lo=0.1, hi=0.8):
    """Per-pixel evaluation of the published index table, one formula at a time."""
    if kind == "NDVI":
        return (n - r) / _clip(n + r)
    if kind == "IAVI":
        return (n - (r - gamma * (b - r))) / _clip(n + (r - gamma * (b - r)))
    if kind == "MSAVI2":
        return (2 * n + 1 - math.sqrt(max((2 * n + 1) ** 2 - 8 * (n - r), 0.0))) / 2
    if kind == "EVI":
        return 2.5 * (n - r) / _clip(n + 6 * r - 7.5 * b + 1)
    if kind == "VDVI":
        return 2 * (2 * g - r - b) / _clip(2 * g + r + b)
    if kind == "WDRVI":
        return (0.2 * n - r) / _clip(0.2 * n + r)
    if kind == "MCARI":
        return 1.5 * (2.5 * (n - r) - 1.3 * (n - g)) / _clip(
            math.sqrt(max((2 * n + 1) ** 2 - (6 * n - 5 * r) - 0.5, 0.0)))
    if kind == "GDVI":
        return n - g
    if kind == "SAVI":
        return (1 + L) * (n - r) / _clip(n + r + L)
    if kind == "RVI":
        return r / _clip(n)
    if kind == "VCI":
        return (scalar_vi("NDVI", n, r, g, b) - lo) / _clip(hi + lo)
    if kind == "GRVI":
        return n / _clip(g)
    if kind == "NDGI":
        return (g - r) / _clip(g + r)
    raise KeyError(kind)


def test_vi_scalar_oracle():
    rng = np.random.default_rng(2024)
    planes = rng.uniform(0.0, 1.0, (4, 1000, 1))
    image = NrgbImage(planes, np.ones((1000, 1), bool))
    params = ViParams(gamma=0.9, L=0.5, ndvi_min=0.1, ndvi_max=0.8)
    worst, worst_kind = 0.0, None
    for kind in ALL_KINDS:
        got = compute_vi(kind, image, params).values[:, 0]
        ref = np.array([scalar_vi(kind.name, *planes[:, i, 0]) for i in range(1000)])
        err = float(np.max(np.abs(got - ref)))
        if err >= worst:
            worst, worst_kind = err, kind.name
    ok = worst < 1e-12
    record_acceptance(2, ok, f"13 indices vs scalar oracle on 1000 pixels, worst abs diff "
                             f"{worst:.1e} ({worst_kind}) < 1e-12")
    assert ok


# ------------------------------------------------------------------ 3

def test_gvi_expressivity():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.0, 1.0, (1, 4, 40, 25))
    image = NrgbImage(x[0], np.ones((40, 25), bool))
    params = ViParams()
    worst = 0.0
    for kind in EXPRESSIBLE_KINDS:
        layer = layer_from_vi(kind, params)
        den = conv2d_forward(x, layer.beta)[0, 0]
        clip_free = np.abs(den) >= 0.05
        diff = np.abs(gvi_forward(layer, x)[0, 0] - compute_vi(kind, image, params).values)
        worst = max(worst, float(diff[clip_free].max()))
    rejected = []
    for kind in (ViKind.MSAVI2, ViKind.MCARI, ViKind.VCI):
        try:
            express_vi(kind, ViParams(ndvi_min=0.0, ndvi_max=1.0))
        except ViError:
            rejected.append(kind.name)
    ok = worst < 1e-10 and len(rejected) == 3 and len(EXPRESSIBLE_KINDS) == 10
    record_acceptance(3, ok, f"{len(EXPRESSIBLE_KINDS)} rational indices reproduced by GVI, "
                             f"worst {worst:.1e} < 1e-10; rejected {','.join(rejected)}")
    assert ok


# ------------------------------------------------------------------ 4

def test_normalization_identities():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((8, 8, 6, 6)) * 2.0 + 0.5
    in_err = np.max(np.abs(norm.group_norm(x, NormState("GN", 8, groups=8))
                           - norm.instance_norm(x)))
    ln_err = np.max(np.abs(norm.group_norm(x, NormState("GN", 8, groups=1))
                           - norm.layer_norm(x)))
    u = rng.standard_normal((8, 8, 6, 6))
    agn_err = np.max(np.abs(norm.agn(u, NormState("AGN", 8, groups=4, rho=-10.0))
                            - norm.batch_norm(u, NormState("BN", 8))))
    bn = NormState("BN", 8, affine_scale=rng.uniform(0.5, 1.5, 8),
                   affine_shift=rng.standard_normal(8))
    for _ in range(10):
        norm.norm_forward(rng.standard_normal((8, 8, 6, 6)), bn)
    upgraded = norm.bn_to_agn_upgrade(bn)
    bn.training = upgraded.training = False
    up_err = np.max(np.abs(norm.norm_forward(u, upgraded) - norm.norm_forward(u, bn)))
    ok = in_err < 1e-12 and ln_err < 1e-12 and agn_err < 5e-4 and up_err < 5e-4
    record_acceptance(4, ok, f"GN(G=C)-IN {in_err:.1e}, GN(G=1)-LN {ln_err:.1e} (< 1e-12); "
                             f"AGN(-10)-BN {agn_err:.1e}, upgrade eval {up_err:.1e} (< 5e-4)")
    assert ok


# ------------------------------------------------------------------ 5

def _confusion_iou(pred, gt, k):
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (gt.ravel(), pred.ravel()), 1)
    tp = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - tp
    return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def test_metric_oracle():
    targets = np.array([[1, 1, 0], [0, 1, 1]], bool).reshape(2, 1, 3)
    iou, miou = miou_overlapped(np.array([[0, 1, 0]]), targets)
    hand = iou.tolist() == [0.5, 0.5] and miou == 0.5
    rng = np.random.default_rng(5)
    agree = 0
    for _ in range(50):
        k = int(rng.integers(2, 7))
        gt = rng.integers(0, k, (9, 11))
        pred = np.where(rng.random(gt.shape) < 0.5, gt, rng.integers(0, k, gt.shape))
        got, m = miou_overlapped(pred, np.arange(k)[:, None, None] == gt, n_classes=k)
        ref = _confusion_iou(pred, gt, k)
        agree += np.allclose(got, ref, equal_nan=True, rtol=0, atol=1e-15) and \
            abs(m - np.nanmean(ref)) < 1e-15
    ok = hand and agree == 50
    record_acceptance(5, ok, f"hand-counted example IoU {iou.tolist()} mIoU {miou}; "
                             f"{agree}/50 random grids match confusion-matrix IoU")
    assert ok


# ------------------------------------------------------------------ 6

def test_agn_fits_indices_better_than_bn():
    start = time.perf_counter()
    errors = {k: {"BN": [], "AGN": []} for k in FUSION_KINDS}
    for seed in range(3):
        data = pixel_data(seed=seed)
        for kind in FUSION_KINDS:
            for mode in ("BN", "AGN"):
                cfg = FitConfig(target_vi=kind, norm_mode=mode, seed=seed)
                errors[kind][mode].append(fit_vi_experiment(cfg, data))
    elapsed = time.perf_counter() - start
    wins = [k.name for k in FUSION_KINDS
            if np.mean(errors[k]["AGN"]) <= np.mean(errors[k]["BN"])]
    for k in FUSION_KINDS:
        print(f"  {k.name:7s} BN {np.mean(errors[k]['BN']):6.2f}%  "
              f"AGN {np.mean(errors[k]['AGN']):6.2f}%")
    ok = len(wins) >= 9 and elapsed < 300
    record_acceptance(6, ok, f"AGN error <= BN on {len(wins)}/12 indices "
                             f"(3 paired seeds, need >= 9), {elapsed:.0f}s < 300s")
    assert ok


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_segmentation_ordering():
    start = time.perf_counter()
    spec = SynthSpec(n_images=200, size=64, seed=0)
    dataset = synth_dataset(spec)
    means = {}
    for variant in ("baseline", "gvi", "agn"):
        scores = [seg.toy_segmentation_experiment(variant, spec, seed=seed, dataset=dataset).miou
                  for seed in range(3)]
        means[variant] = float(np.mean(scores))
        print(f"  {variant:8s} mIoU " + " ".join(f"{s:.4f}" for s in scores)
              + f"  mean {means[variant]:.4f}")
    elapsed = time.perf_counter() - start
    ok = means["gvi"] > means["baseline"] and means["agn"] >= means["gvi"] and elapsed < 1800
    record_acceptance(7, ok, f"mean mIoU baseline {means['baseline']:.4f} < GVI "
                             f"{means['gvi']:.4f} <= AGN {means['agn']:.4f} "
                             f"(200 images 64x64, 3 seeds), {elapsed:.0f}s < 1800s")
    assert ok


# ------------------------------------------------------------------ 8

def test_correlation_sanity():
    images, grids = synth_dataset(SynthSpec(n_images=20, size=64, seed=9))
    params = ViParams().with_vci_stats(*vci_stats(images))
    rasters = [compute_all(im, params) for im in images]
    stacked = [np.concatenate([r[i].values[r[i].valid_mask] for r in rasters])
               for i in range(12)]
    m = correlation_matrix([type(rasters[0][i])(rasters[0][i].kind, s[None, :],
                                                np.ones((1, s.size), bool))
                            for i, s in enumerate(stacked)])
    nd, sv = FUSION_KINDS.index(ViKind.NDVI), FUSION_KINDS.index(ViKind.SAVI)
    ok = (m.shape == (12, 12) and np.array_equal(m, m.T) and np.all(np.diag(m) == 1.0)
          and m[nd, sv] > 0.9)
    record_acceptance(8, ok, f"12x12 matrix symmetric with unit diagonal; "
                             f"corr(NDVI, SAVI) = {m[nd, sv]:.4f} > 0.9")
    assert ok


# ------------------------------------------------------------------ 9

def _snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_determinism(tmp_path):
    rng = np.random.default_rng(3)
    data = write_dataset(tmp_path / "data", [random_image(rng, 16, 16, invalid=0.1)
                                             for _ in range(2)])
    img = ["--rgb", str(data / "rgb/im00.png"), "--nir", str(data / "nir/im00.png"),
           "--mask", str(data / "mask/im00.png")]
    commands = {
        "vi compute csv": (["vi", "compute", "--kind", "all", "--stats-dir", str(data)] + img,
                           "dir"),
        "vi compute png16": (["vi", "compute", "--kind", "all", "--format", "png16",
                              "--stats-dir", str(data)] + img, "dir"),
        "vi corr": (["vi", "corr", "--dir", str(data)], "file"),
        "gradcheck": (["gradcheck", "--seed", "3", "--points", "5"], "file"),
        "fit-experiment": (["fit-experiment", "--norm", "both", "--vi", "all",
                            "--train-pixels", "512", "--test-pixels", "256", "--epochs", "1"],
                           "file"),
        "toy-seg": (["toy-seg", "--variant", "all", "--seeds", "1", "--images", "10",
                     "--size", "16", "--epochs", "2"], "dir"),
        "params save": (["params", "save", "--m", "12", "--k", "3", "--seed", "4"], "file"),
        "synth": (["synth", "--images", "3", "--size", "16"], "dir"),
    }
    gvi_file = tmp_path / "layer.csv"
    cli.main(["params", "save", "--out", str(gvi_file), "--ndvi-channel"])
    commands["params load"] = (["params", "load", str(gvi_file)] + img, "dir")
    identical = []
    for name, (argv, kind) in commands.items():
        snaps = []
        for run in ("first", "second"):
            root = tmp_path / name.replace(" ", "_") / run
            root.mkdir(parents=True)
            target = root / ("out.csv" if kind == "file" else "out")
            assert cli.main(argv + ["--out", str(target)]) == 0, name
            snaps.append(_snapshot(root))
        if snaps[0] and snaps[0] == snaps[1]:
            identical.append(name)
    ok = len(identical) == len(commands)
    record_acceptance(9, ok, f"{len(identical)}/{len(commands)} CLI subcommands produce "
                             f"byte-identical output on rerun")
    assert ok
