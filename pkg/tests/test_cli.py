import csv

import numpy as np
import pytest
from PIL import Image

from gvifusion import cli, diffcore
from gvifusion.indices import ViParams, compute_vi
from gvifusion.raster import load_image

from conftest import random_image, write_dataset


@pytest.fixture
def dataset(tmp_path, rng):
    return write_dataset(tmp_path / "data", [random_image(rng, 8, 9, invalid=0.2)
                                             for _ in range(3)])


def image_args(root, i=0):
    name = f"im{i:02d}.png"
    return ["--rgb", str(root / "rgb" / name), "--nir", str(root / "nir" / name),
            "--mask", str(root / "mask" / name)]


def read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def test_vi_compute_single_csv(dataset, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["vi", "compute", "--kind", "ndvi", *image_args(dataset), "--out", str(out)]) == 0
    assert [p.name for p in out.iterdir()] == ["ndvi.csv"]
    im = load_image(*[dataset / d / "im00.png" for d in ("rgb", "nir", "mask")])
    rows = list(csv.reader(open(out / "ndvi.csv")))
    expect = compute_vi("ndvi", im).values
    for y, row in enumerate(rows):
        for x, v in enumerate(row):
            assert (v == "") == (not im.valid_mask[y, x])
            if v:
                assert float(v) == expect[y, x]


def test_vi_compute_all_png16(dataset, tmp_path):
    out = tmp_path / "out"
    args = ["vi", "compute", "--kind", "all", *image_args(dataset), "--out", str(out),
            "--format", "png16", "--stats-dir", str(dataset)]
    assert cli.main(args) == 0
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 12 and "iavi.png" not in pngs
    with Image.open(out / "ndvi.png") as im:
        arr = np.asarray(im)
    assert arr.dtype == np.uint16 or im.mode.startswith("I")
    side = dict(line.split("=", 1) for line in (out / "evi.png.txt").read_text().splitlines())
    assert side["low_source"] == "observed" and side["high_source"] == "observed"
    side = dict(line.split("=", 1) for line in (out / "ndvi.png.txt").read_text().splitlines())
    assert (float(side["low"]), float(side["high"])) == (0.0, 1.0)


def test_png16_mapping_inverts(rng):
    values = np.array([[0.0, 0.25, 1.0, 2.0]])
    png, _ = cli.raster_png16(cli.ViKind.NDVI, values, np.ones((1, 4), bool))
    import io
    q = np.asarray(Image.open(io.BytesIO(png))).astype(float)
    assert np.allclose(q / 65535, [[0.0, 0.25, 1.0, 1.0]], atol=1e-5)


def test_vci_without_stats_is_an_error(dataset, tmp_path, capsys):
    code = cli.main(["vi", "compute", "--kind", "vci", *image_args(dataset),
                     "--out", str(tmp_path / "o")])
    assert code == 1 and "VCI" in capsys.readouterr().err
    code = cli.main(["vi", "compute", "--kind", "vci", *image_args(dataset), "--ndvi-min", "0",
                     "--ndvi-max", "1", "--out", str(tmp_path / "o")])
    assert code == 0


def test_vi_corr(dataset, tmp_path):
    out = tmp_path / "corr.csv"
    assert cli.main(["vi", "corr", *image_args(dataset, 1), "--out", str(out)]) == 0
    names, m = read_matrix(out)
    assert names[0] == "NDVI" and len(names) == 12 and "IAVI" not in names
    assert np.array_equal(m, m.T) and np.all(np.diag(m) == 1.0)
    assert cli.main(["vi", "corr", "--dir", str(dataset), "--out", str(out)]) == 0
    assert read_matrix(out)[1].shape == (12, 12)


def test_vi_corr_empty_directory(tmp_path):
    for sub in ("rgb", "nir"):
        (tmp_path / "empty" / sub).mkdir(parents=True)
    assert cli.main(["vi", "corr", "--dir", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "c.csv")]) == 2
    assert not (tmp_path / "c.csv").exists()


def test_usage_and_data_errors(tmp_path, dataset, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["vi", "compute", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    assert cli.main(["vi", "compute", "--kind", "xyz", *image_args(dataset),
                     "--out", str(tmp_path)]) == 1
    assert cli.main(["vi", "compute", "--kind", "ndvi", "--rgb", str(tmp_path / "no.png"),
                     "--nir", str(tmp_path / "no.png"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["vi", "compute", "--kind", "iavi", "--gamma", "2.0", *image_args(dataset),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["toy-seg", "--variant", "unet", "--out", str(tmp_path / "t")]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("hello\n")
    assert cli.main(["params", "load", str(bad)]) == 2


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--seed", "1", "--points", "5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "op,max_rel_error,pass" and all(l.endswith(",yes") for l in out[1:])
    assert len(out) == 21


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = diffcore.sigmoid_backward
    monkeypatch.setattr(diffcore, "sigmoid_backward", lambda x, u: real(x, u) + 1e-2)
    assert cli.main(["gradcheck", "--points", "3"]) == 3
    assert "sigmoid" in [l.split(",")[0] for l in capsys.readouterr().out.splitlines()
                         if l.endswith(",no")]


def test_fit_experiment_command(tmp_path):
    out = tmp_path / "fit.csv"
    small = ["--train-pixels", "256", "--test-pixels", "128", "--epochs", "1"]
    assert cli.main(["fit-experiment", "--norm", "agn", "--vi", "ndvi", *small,
                     "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["vi", "norm_mode", "relative_error_pct", "seed"]
    assert len(rows) == 2 and rows[1][:2] == ["ndvi", "AGN"]
    assert cli.main(["fit-experiment", "--norm", "bn", "--vi", "all", *small,
                     "--out", str(out)]) == 0
    assert len(list(csv.reader(open(out)))) == 13


def test_toy_seg_command(tmp_path):
    out = tmp_path / "seg"
    args = ["toy-seg", "--variant", "baseline,gvi", "--seeds", "2", "--images", "10", "--size",
            "16", "--epochs", "2", "--out", str(out)]
    assert cli.main(args) == 0
    runs = list(csv.DictReader(open(out / "runs.csv")))
    assert len(runs) == 2 * 2 * 2
    assert set(runs[0]) >= {"variant", "seed", "epoch", "loss", "lr", "miou",
                            "iou_background", "iou_weed_cluster", "iou_waterway"}
    summary = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["method"] for r in summary] == ["Baseline", "Baseline + GVI"]
    assert all(r["runs"] == "2" for r in summary)


def test_params_save_load_apply(tmp_path, dataset):
    path = tmp_path / "gvi.csv"
    assert cli.main(["params", "save", "--out", str(path), "--express", "ndvi"]) == 0
    out = tmp_path / "applied"
    assert cli.main(["params", "load", str(path), *image_args(dataset), "--out", str(out)]) == 0
    im = load_image(*[dataset / d / "im00.png" for d in ("rgb", "nir", "mask")])
    rows = list(csv.reader(open(out / "gvi_00.csv")))
    got = np.array([[float(v) if v else np.nan for v in r] for r in rows])
    ref = np.where(im.valid_mask, compute_vi("ndvi", im, ViParams()).values, np.nan)
    assert np.allclose(got, ref, equal_nan=True, atol=1e-12)


def test_synth_command(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--images", "2", "--size", "8"]) == 0
    assert len(list((tmp_path / "s" / "rgb").iterdir())) == 2
    assert cli.main(["vi", "corr", "--dir", str(tmp_path / "s"),
                     "--out", str(tmp_path / "c.csv")]) == 0


def snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.parametrize("argv", [
    ["vi", "compute", "--kind", "all", "--format", "png16", "--ndvi-min", "0", "--ndvi-max", "1"],
    ["vi", "compute", "--kind", "all", "--ndvi-min", "0", "--ndvi-max", "1"],
    ["vi", "corr"],
    ["gradcheck", "--points", "2"],
    ["fit-experiment", "--norm", "both", "--vi", "ndvi,evi", "--train-pixels", "256",
     "--test-pixels", "128", "--epochs", "1"],
    ["toy-seg", "--variant", "agn", "--seeds", "1", "--images", "8", "--size", "16",
     "--epochs", "2"],
    ["params", "save", "--m", "3", "--k", "3"],
    ["synth", "--images", "2", "--size", "8"],
])
def test_rerun_is_byte_identical(tmp_path, dataset, argv):
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        args = list(argv)
        if args[0] == "vi":
            args += image_args(dataset)
        if args[0] in ("gradcheck", "fit-experiment", "params") or args[:2] == ["vi", "corr"]:
            target = root / "out.csv"
        else:
            target = root / "out"
        assert cli.main(args + ["--out", str(target)]) == 0
        outs.append(snapshot(root))
    assert outs[0] and outs[0] == outs[1]


def test_thread_limit_environment(monkeypatch, capsys):
    monkeypatch.setenv("GVIFUSION_THREADS", "1")
    assert cli.main(["gradcheck", "--points", "1"]) == 0
