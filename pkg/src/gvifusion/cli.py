"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Set GVIFUSION_THREADS to cap the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import statistics
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from gvifusion import gradcheck, params as paramfile
from gvifusion.diffcore import DivergenceError
from gvifusion.fileio import atomic_write_bytes, atomic_write_text
from gvifusion.gvi import gvi_forward, gvi_init, layer_from_vi
from gvifusion.indices import (
    FUSION_KINDS, ViError, ViKind, ViParams, compute_vi, meaningful_range,
    pearson_matrix, vci_stats,
)
from gvifusion.metrics import MetricError
from gvifusion.params import ParamFileError
from gvifusion.raster import RasterError, load_image, save_image, to_tensor

log = logging.getLogger("gvifusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v: float) -> str:
    return "%.17g" % v


# ---------------------------------------------------------------- inputs

def _vi_params(args) -> ViParams:
    lo, hi = getattr(args, "ndvi_min", None), getattr(args, "ndvi_max", None)
    if (lo is None) != (hi is None):
        raise UsageError("--ndvi-min and --ndvi-max must be given together")
    return ViParams(gamma=args.gamma, L=args.L, ndvi_min=lo, ndvi_max=hi, clip_eps=args.clip_eps)


def _dataset_triples(directory):
    """``(rgb, nir, mask|None)`` paths from a directory with rgb/, nir/ and optional mask/."""
    root = Path(directory)
    if not root.is_dir():
        raise RasterError(f"not a directory: {root}")
    rgb_dir, nir_dir, mask_dir = root / "rgb", root / "nir", root / "mask"
    if not rgb_dir.is_dir() or not nir_dir.is_dir():
        raise RasterError(f"{root} must contain rgb/ and nir/ subdirectories")
    triples = []
    for rgb in sorted(p for p in rgb_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        nir = next((p for p in sorted(nir_dir.glob(rgb.stem + ".*"))), None)
        if nir is None:
            raise RasterError(f"no NIR file for {rgb.name}")
        mask = next((p for p in sorted(mask_dir.glob(rgb.stem + ".*"))), None) \
            if mask_dir.is_dir() else None
        triples.append((rgb, nir, mask))
    if not triples:
        raise RasterError(f"no images found in {rgb_dir}")
    return triples


def _load_inputs(args):
    if getattr(args, "dir", None):
        return [load_image(*t) for t in _dataset_triples(args.dir)]
    if not (args.rgb and args.nir):
        raise UsageError("give --rgb and --nir, or --dir")
    return [load_image(args.rgb, args.nir, args.mask)]


def _add_vi_param_flags(p):
    p.add_argument("--gamma", type=float, default=0.9, help="IAVI gamma in (0.65, 1.12)")
    p.add_argument("--L", type=float, default=0.5, help="SAVI soil factor: 0, 0.5 or 1")
    p.add_argument("--clip-eps", type=float, default=1e-6, help="denominator clip")
    p.add_argument("--ndvi-min", type=float, help="dataset NDVI minimum (VCI)")
    p.add_argument("--ndvi-max", type=float, help="dataset NDVI maximum (VCI)")


# ---------------------------------------------------------------- raster output

def raster_csv(values, mask) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row, mrow in zip(values, mask):
        w.writerow([_fmt(v) if m else "" for v, m in zip(row, mrow)])
    return buf.getvalue()


def raster_png16(kind: ViKind, values, mask):
    """16-bit PNG bytes and sidecar text describing the linear value mapping."""
    rng = meaningful_range(kind)
    observed = values[mask] if mask.any() else np.zeros(1)
    lo, lo_src = (rng.low, "meaningful") if np.isfinite(rng.low) else (float(observed.min()), "observed")
    hi, hi_src = (rng.high, "meaningful") if np.isfinite(rng.high) else (float(observed.max()), "observed")
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    q = np.where(mask, np.rint(scaled * 65535.0), 0).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    sidecar = (
        f"kind={kind.value}\n"
        f"low={_fmt(lo)}\nlow_source={lo_src}\n"
        f"high={_fmt(hi)}\nhigh_source={hi_src}\n"
        "mapping=value = low + pixel / 65535 * (high - low); values outside [low, high] saturate\n"
        "invalid_pixels=0\n"
    )
    return buf.getvalue(), sidecar


# ---------------------------------------------------------------- commands

def _parse_kinds(text):
    if text == "all":
        return FUSION_KINDS
    try:
        kinds = tuple(ViKind.parse(t.strip()) for t in text.split(",") if t.strip())
    except ViError as exc:
        raise UsageError(str(exc)) from None
    if not kinds:
        raise UsageError("no index names given")
    return kinds


def cmd_vi_compute(args) -> int:
    kinds = _parse_kinds(args.kind)
    params = _vi_params(args)
    if ViKind.VCI in kinds and not params.has_vci_stats:
        if not args.stats_dir:
            raise UsageError("VCI needs --ndvi-min/--ndvi-max or --stats-dir")
        dataset = [load_image(*t) for t in _dataset_triples(args.stats_dir)]
        params = params.with_vci_stats(*vci_stats(dataset, params))
    image = load_image(args.rgb, args.nir, args.mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for kind in kinds:
        r = compute_vi(kind, image, params)
        if args.format == "csv":
            atomic_write_text(out / f"{kind.value}.csv", raster_csv(r.values, r.valid_mask))
        else:
            png, sidecar = raster_png16(kind, r.values, r.valid_mask)
            atomic_write_bytes(out / f"{kind.value}.png", png)
            atomic_write_text(out / f"{kind.value}.png.txt", sidecar)
    print(f"wrote {len(kinds)} raster(s) to {out}")
    return EXIT_OK


def cmd_vi_corr(args) -> int:
    images = _load_inputs(args)
    params = _vi_params(args)
    if not params.has_vci_stats:
        params = params.with_vci_stats(*vci_stats(images, params))
    columns = []
    for image in images:
        mask = image.valid_mask
        columns.append(np.stack([compute_vi(k, image, params).values[mask] for k in FUSION_KINDS]))
    samples = np.concatenate(columns, axis=1)
    if samples.shape[1] < 2:
        raise ViError("need at least two valid pixels")
    m = pearson_matrix(samples)
    names = [k.name for k in FUSION_KINDS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + names)
    for name, row in zip(names, m):
        w.writerow([name] + ["nan" if np.isnan(v) else _fmt(v) for v in row])
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {len(names)}x{len(names)} correlation matrix over {samples.shape[1]} pixels to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(seed=args.seed, n_points=args.points)
    lines = ["op,max_rel_error,pass"]
    worst = 0.0
    for name, err, _ in report:
        ok = err < gradcheck.TOLERANCE
        worst = max(worst, err)
        lines.append(f"{name},{err:.3e},{'yes' if ok else 'no'}")
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    if not worst < gradcheck.TOLERANCE:
        print(f"gradient check FAILED (worst {worst:.3e} >= {gradcheck.TOLERANCE})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK




def cmd_fit_experiment(args) -> int:
    from gvifusion.experiments.fit import FitConfig, fit_vi_experiment, pixel_data

    norms = ("BN", "AGN") if args.norm == "both" else (args.norm.upper(),)
    kinds = _parse_kinds(args.vi)
    rows = ["vi,norm_mode,relative_error_pct,seed"]
    for rep in range(args.seeds):
        seed = args.seed + rep
        data = pixel_data(n_train=args.train_pixels, n_test=args.test_pixels, seed=seed)
        for kind in kinds:
            for mode in norms:
                cfg = FitConfig(target_vi=kind, norm_mode=mode, hidden_width=args.hidden,
                                epochs=args.epochs, seed=seed, rho_init=args.rho_init)
                err = fit_vi_experiment(cfg, data)
                rows.append(f"{kind.value},{mode},{err:.6f},{seed}")
                log.info("%s %s seed=%d: %.3f%%", kind.name, mode, seed, err)
    atomic_write_text(args.out, "\n".join(rows) + "\n")
    print(f"wrote {len(rows) - 1} row(s) to {args.out}")
    return EXIT_OK


def cmd_toy_seg(args) -> int:
    from gvifusion.experiments.schedule import TrainSchedule
    from gvifusion.experiments.segmentation import (
        CLASS_NAMES, VARIANT_LABELS, VARIANTS, SegConfig, parse_variant,
        toy_segmentation_experiment,
    )
    from gvifusion.experiments.synth import SynthSpec, synth_dataset

    if args.variant == "all":
        variants = VARIANTS
    else:
        try:
            variants = tuple(parse_variant(v) for v in args.variant.split(","))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    spec = SynthSpec(n_images=args.images, size=args.size, seed=args.data_seed)
    dataset = synth_dataset(spec)
    config = SegConfig(epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    per_run = io.StringIO()
    w = csv.writer(per_run, lineterminator="\n")
    w.writerow(["variant", "seed", "epoch", "loss", "val_loss", "lr", "miou"]
               + [f"iou_{c}" for c in CLASS_NAMES])
    finals = {v: [] for v in variants}
    for variant in VARIANTS:
        if variant not in variants:
            continue
        for rep in range(args.seeds):
            seed = args.seed + rep
            res = toy_segmentation_experiment(variant, spec, TrainSchedule(), seed, config, dataset)
            for h in res.history:
                w.writerow([variant, seed, h["epoch"], _fmt(h["loss"]), _fmt(h["val_loss"]),
                            _fmt(h["lr"]), _fmt(h["miou"])]
                           + ["" if np.isnan(v) else _fmt(v) for v in h["class_iou"]])
            finals[variant].append(res)
            log.info("%s seed=%d mIoU=%.4f", variant, seed, res.miou)
    atomic_write_text(out / "runs.csv", per_run.getvalue())

    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(["method", "runs", "miou_mean", "miou_std"] + list(CLASS_NAMES))
    for variant in VARIANTS:
        runs = finals.get(variant)
        if not runs:
            continue
        mious = [r.miou for r in runs]
        std = statistics.stdev(mious) if len(mious) > 1 else 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            class_means = np.nanmean(np.stack([r.class_iou for r in runs]), axis=0)
        w.writerow([VARIANT_LABELS[variant], len(runs), _fmt(float(np.mean(mious))), _fmt(std)]
                   + ["" if np.isnan(v) else _fmt(v) for v in class_means])
    atomic_write_text(out / "summary.csv", summary.getvalue())
    sys.stdout.write(summary.getvalue())
    return EXIT_OK


def cmd_params_save(args) -> int:
    if args.express:
        layer = layer_from_vi(args.express, ViParams(clip_eps=args.clip_eps))
    else:
        layer = gvi_init(args.m, args.k, args.seed, clip_eps=args.clip_eps,
                         ndvi_channel=args.ndvi_channel)
    paramfile.save_gvi(args.out, layer)
    print(f"wrote GVI layer m={layer.channels} k={layer.k} to {args.out}")
    return EXIT_OK


def cmd_params_load(args) -> int:
    layer = paramfile.load_gvi(args.path)
    print(f"GVI layer: m={layer.channels} k={layer.k} clip_eps={layer.clip_eps:g}")
    if args.rgb or args.nir:
        if not (args.rgb and args.nir and args.out):
            raise UsageError("applying a layer needs --rgb, --nir and --out")
        image = load_image(args.rgb, args.nir, args.mask)
        out = gvi_forward(layer, to_tensor(image))[0]
        dest = Path(args.out)
        dest.mkdir(parents=True, exist_ok=True)
        for i, plane in enumerate(out):
            atomic_write_text(dest / f"gvi_{i:02d}.csv", raster_csv(plane, image.valid_mask))
        print(f"wrote {len(out)} GVI channel(s) to {dest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from gvifusion.experiments.synth import SynthSpec, synth_dataset

    images, grids = synth_dataset(SynthSpec(n_images=args.images, size=args.size, seed=args.seed))
    root = Path(args.out)
    for sub in ("rgb", "nir", "mask", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (im, grid) in enumerate(zip(images, grids)):
        stem = f"img_{i:04d}.png"
        save_image(im, root / "rgb" / stem, root / "nir" / stem, root / "mask" / stem)
        bits = sum(grid.labels[k].astype(np.uint8) << k for k in range(grid.n_classes))
        Image.fromarray(bits.astype(np.uint8), mode="L").save(root / "labels" / stem)
    print(f"wrote {len(images)} synthetic image(s) to {root}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gvifusion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    vi = sub.add_parser("vi", help="vegetation index rasters and correlations")
    vi_sub = vi.add_subparsers(dest="vi_command", required=True)

    c = vi_sub.add_parser("compute", help="compute index rasters for one image")
    c.add_argument("--rgb", required=True)
    c.add_argument("--nir", required=True)
    c.add_argument("--mask")
    c.add_argument("--kind", required=True, help="index name or 'all' (12 indices, no IAVI)")
    c.add_argument("--stats-dir", help="dataset directory used to derive VCI NDVI extrema")
    c.add_argument("--format", choices=("csv", "png16"), default="csv")
    c.add_argument("--out", required=True, help="output directory")
    _add_vi_param_flags(c)
    c.set_defaults(func=cmd_vi_compute)

    r = vi_sub.add_parser("corr", help="12x12 pixel correlation matrix")
    r.add_argument("--dir", help="directory with rgb/, nir/ and optional mask/")
    r.add_argument("--rgb")
    r.add_argument("--nir")
    r.add_argument("--mask")
    r.add_argument("--out", required=True, help="output CSV")
    _add_vi_param_flags(r)
    r.set_defaults(func=cmd_vi_corr)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=100)
    g.add_argument("--out", help="optional CSV copy of the report")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fit-experiment", help="fit indices per pixel with BN vs AGN")
    f.add_argument("--norm", choices=("bn", "agn", "both"), required=True)
    f.add_argument("--vi", default="all", help="comma-separated index names or 'all'")
    f.add_argument("--seeds", type=int, default=1, help="repetitions (seed, seed+1, ...)")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--epochs", type=int, default=4)
    f.add_argument("--hidden", type=int, default=16)
    f.add_argument("--rho-init", type=float, default=0.0)
    f.add_argument("--train-pixels", type=int, default=4096)
    f.add_argument("--test-pixels", type=int, default=2048)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_experiment)

    t = sub.add_parser("toy-seg", help="synthetic segmentation study over the four variants")
    t.add_argument("--variant", default="all", help="baseline, vi, gvi, agn, comma list or all")
    t.add_argument("--seeds", type=int, default=3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--images", type=int, default=200)
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--epochs", type=int, default=24)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_toy_seg)

    pr = sub.add_parser("params", help="save or load GVI layer parameter files")
    pr_sub = pr.add_subparsers(dest="params_command", required=True)
    s = pr_sub.add_parser("save")
    s.add_argument("--out", required=True)
    s.add_argument("--m", type=int, default=12)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip-eps", type=float, default=1e-6)
    s.add_argument("--ndvi-channel", action="store_true")
    s.add_argument("--express", help="write the fixed 1x1 layer of a rational index instead")
    s.set_defaults(func=cmd_params_save)
    ld = pr_sub.add_parser("load")
    ld.add_argument("path")
    ld.add_argument("--rgb")
    ld.add_argument("--nir")
    ld.add_argument("--mask")
    ld.add_argument("--out")
    ld.set_defaults(func=cmd_params_load)

    sy = sub.add_parser("synth", help="write a synthetic NRGB dataset to disk")
    sy.add_argument("--out", required=True)
    sy.add_argument("--images", type=int, default=8)
    sy.add_argument("--size", type=int, default=64)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(func=cmd_synth)
    return p


def _limit_threads():
    n = os.environ.get("GVIFUSION_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gvifusion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"gvifusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RasterError, ViError, ParamFileError, MetricError, FileNotFoundError,
            ValueError) as exc:
        print(f"gvifusion: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
