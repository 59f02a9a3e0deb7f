"""Flat CSV parameter files for GVI layers and normalization states.

Layout (one value per row, floats written with ``repr`` so they round-trip)::

    record,name,index,value
    meta,kind,,gvi
    meta,clip_eps,,1e-06
    shape,alpha.weight,,12x4x1x1
    value,alpha.weight,0,0.01234...
"""
from __future__ import annotations

import csv
import io

import numpy as np

from gvifusion.diffcore import ConvFilter
from gvifusion.fileio import atomic_write_text
from gvifusion.gvi import GviLayer
from gvifusion.norm import NormState

HEADER = ["record", "name", "index", "value"]


class ParamFileError(ValueError):
    pass


def dumps_params(arrays: dict, meta: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for key, value in meta.items():
        w.writerow(["meta", key, "", value])
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        w.writerow(["shape", name, "", "x".join(str(d) for d in arr.shape) or "scalar"])
        for i, v in enumerate(arr.reshape(-1)):
            w.writerow(["value", name, i, repr(float(v))])
    return buf.getvalue()


def loads_params(text: str):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != HEADER:
        raise ParamFileError("not a parameter file (bad header)")
    meta, shapes, values = {}, {}, {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParamFileError(f"line {lineno}: expected 4 fields, got {len(row)}")
        record, name, index, value = row
        if record == "meta":
            meta[name] = value
        elif record == "shape":
            shapes[name] = () if value == "scalar" else tuple(int(d) for d in value.split("x"))
            values[name] = []
        elif record == "value":
            if name not in shapes:
                raise ParamFileError(f"line {lineno}: value for undeclared array {name!r}")
            if int(index) != len(values[name]):
                raise ParamFileError(f"line {lineno}: out-of-order index for {name!r}")
            values[name].append(float(value))
        else:
            raise ParamFileError(f"line {lineno}: unknown record type {record!r}")
    arrays = {}
    for name, shape in shapes.items():
        flat = np.array(values[name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ParamFileError(f"{name}: expected {int(np.prod(shape))} values, got {flat.size}")
        arrays[name] = flat.reshape(shape)
    return arrays, meta


def save_params(path, arrays: dict, meta: dict) -> None:
    atomic_write_text(path, dumps_params(arrays, meta))


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        return loads_params(fh.read())


def gvi_to_params(layer: GviLayer):
    arrays = {
        "alpha.weight": layer.alpha.weight,
        "alpha.bias": layer.alpha.bias,
        "beta.weight": layer.beta.weight,
        "beta.bias": layer.beta.bias,
    }
    return arrays, {"kind": "gvi", "clip_eps": repr(layer.clip_eps)}


def gvi_from_params(arrays, meta) -> GviLayer:
    if meta.get("kind") != "gvi":
        raise ParamFileError(f"expected a gvi parameter file, got kind={meta.get('kind')!r}")
    try:
        alpha = ConvFilter(arrays["alpha.weight"], arrays["alpha.bias"])
        beta = ConvFilter(arrays["beta.weight"], arrays["beta.bias"])
        return GviLayer(alpha, beta, float(meta["clip_eps"]))
    except KeyError as exc:
        raise ParamFileError(f"missing entry {exc}") from None


def norm_to_params(state: NormState):
    arrays = {
        "running_mean": state.running_mean,
        "running_var": state.running_var,
        "affine_scale": state.affine_scale,
        "affine_shift": state.affine_shift,
    }
    meta = {
        "kind": "norm",
        "mode": state.mode,
        "channels": state.channels,
        "groups": state.groups,
        "rho": repr(state.rho),
        "momentum": repr(state.momentum),
        "eps_norm": repr(state.eps_norm),
    }
    return arrays, meta


def norm_from_params(arrays, meta) -> NormState:
    if meta.get("kind") != "norm":
        raise ParamFileError(f"expected a norm parameter file, got kind={meta.get('kind')!r}")
    return NormState(
        mode=meta["mode"],
        channels=int(meta["channels"]),
        groups=int(meta["groups"]),
        running_mean=arrays["running_mean"],
        running_var=arrays["running_var"],
        affine_scale=arrays["affine_scale"],
        affine_shift=arrays["affine_shift"],
        rho=float(meta["rho"]),
        momentum=float(meta["momentum"]),
        eps_norm=float(meta["eps_norm"]),
        training=False,
    )


def save_gvi(path, layer: GviLayer) -> None:
    save_params(path, *gvi_to_params(layer))


def load_gvi(path) -> GviLayer:
    return gvi_from_params(*load_params(path))


def save_norm(path, state: NormState) -> None:
    save_params(path, *norm_to_params(state))


def load_norm(path) -> NormState:
    return norm_from_params(*load_params(path))
