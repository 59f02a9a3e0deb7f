"""Batch, group, instance, layer and additive group normalization.

Inputs are ``[N, C, H, W]`` arrays; ``[N, C]`` arrays are treated as
``[N, C, 1, 1]`` and returned in their original shape.

AGN sums a gated group-normalized response and a batch-normalized response,
both without their own affine, then applies the single per-channel affine:

    y = scale * (sigmoid(rho) * gn(x) + bn(x)) + shift
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from gvifusion.diffcore import sigmoid_forward

MODES = ("BN", "GN", "IN", "LN", "AGN")


class NormError(ValueError):
    pass


@dataclass
class NormState:
    mode: str
    channels: int
    groups: int = 1
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    affine_scale: np.ndarray = None
    affine_shift: np.ndarray = None
    rho: float = -10.0
    momentum: float = 0.1
    eps_norm: float = 1e-5
    training: bool = True
    grad_scale: np.ndarray = None
    grad_shift: np.ndarray = None
    grad_rho: float = 0.0

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in MODES:
            raise NormError(f"unknown normalization mode {self.mode!r}")
        c = self.channels
        if self.mode == "IN":
            self.groups = c
        elif self.mode == "LN":
            self.groups = 1
        if self.mode in ("GN", "IN", "LN", "AGN"):
            if not 1 <= self.groups <= c or c % self.groups:
                raise NormError(f"{c} channels cannot be split into {self.groups} groups")
        if not self.eps_norm > 0:
            raise NormError("eps_norm must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise NormError("momentum must lie in (0, 1)")
        for name, fill in (("running_mean", 0.0), ("running_var", 1.0),
                           ("affine_scale", 1.0), ("affine_shift", 0.0)):
            value = getattr(self, name)
            value = np.full(c, fill) if value is None else np.array(value, dtype=np.float64)
            if value.shape != (c,):
                raise NormError(f"{name} must have shape ({c},), got {value.shape}")
            setattr(self, name, value)
        if np.any(self.running_var < 0):
            raise NormError("running_var must be nonnegative")
        self.rho = float(self.rho)
        self.grad_scale = np.zeros(c)
        self.grad_shift = np.zeros(c)
        self.grad_rho = 0.0

    @property
    def uses_running_stats(self) -> bool:
        return self.mode in ("BN", "AGN")

    def zero_grad(self):
        self.grad_scale[...] = 0.0
        self.grad_shift[...] = 0.0
        self.grad_rho = 0.0

    def copy(self) -> "NormState":
        return copy.deepcopy(self)


def _as4(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None, None], True
    if x.ndim != 4:
        raise NormError(f"expected [N, C] or [N, C, H, W] input, got shape {x.shape}")
    return x, False


def _check_channels(x, s: NormState):
    if x.shape[1] != s.channels:
        raise NormError(f"input has {x.shape[1]} channels, state expects {s.channels}")


def _standardize(x, axes, eps):
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std, mean, var


def _standardize_backward(g, xhat, inv_std, axes):
    mean_g = g.mean(axis=axes, keepdims=True)
    mean_gx = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - mean_g - xhat * mean_gx)


def _bn_normalize(x, s: NormState, update: bool):
    """BN response without affine; updates running stats when training and ``update``."""
    if s.training:
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise NormError("batch statistics need at least two values per channel")
        xhat, inv_std, mean, var = _standardize(x, (0, 2, 3), s.eps_norm)
        if update:
            count = n * h * w
            unbiased = var.reshape(-1) * count / (count - 1)
            s.running_mean = (1 - s.momentum) * s.running_mean + s.momentum * mean.reshape(-1)
            s.running_var = (1 - s.momentum) * s.running_var + s.momentum * unbiased
        return xhat, inv_std
    inv_std = 1.0 / np.sqrt(s.running_var + s.eps_norm)[None, :, None, None]
    return (x - s.running_mean[None, :, None, None]) * inv_std, inv_std


def _gn_normalize(x, groups, eps):
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, c // groups, h, w)
    xhat, inv_std, _, _ = _standardize(xg, (2, 3, 4), eps)
    return xhat.reshape(n, c, h, w), inv_std


def _gn_backward(g, xhat, inv_std, groups):
    n, c, h, w = g.shape
    shape5 = (n, groups, c // groups, h, w)
    out = _standardize_backward(g.reshape(shape5), xhat.reshape(shape5), inv_std, (2, 3, 4))
    return out.reshape(n, c, h, w)


def _affine(y, s: NormState):
    return y * s.affine_scale[None, :, None, None] + s.affine_shift[None, :, None, None]


def batch_norm(x, s: NormState) -> np.ndarray:
    x4, flat = _as4(x)
    _check_channels(x4, s)
    y, _ = _bn_normalize(x4, s, update=True)
    out = _affine(y, s)
    return out[:, :, 0, 0] if flat else out


def group_norm(x, s: NormState) -> np.ndarray:
    """Per-sample normalization over each group of ``C / G`` channels and all pixels."""
    x4, flat = _as4(x)
    _check_channels(x4, s)
    y, _ = _gn_normalize(x4, s.groups, s.eps_norm)
    out = _affine(y, s)
    return out[:, :, 0, 0] if flat else out


def instance_norm(x, eps: float = 1e-5) -> np.ndarray:
    """Reference instance normalization (per sample, per channel), no affine."""
    x4, flat = _as4(x)
    y = _standardize(x4, (2, 3), eps)[0]
    return y[:, :, 0, 0] if flat else y


def layer_norm(x, eps: float = 1e-5) -> np.ndarray:
    """Reference layer normalization (per sample over C, H, W), no affine."""
    x4, flat = _as4(x)
    y = _standardize(x4, (1, 2, 3), eps)[0]
    return y[:, :, 0, 0] if flat else y


def agn(x, s: NormState) -> np.ndarray:
    x4, flat = _as4(x)
    _check_channels(x4, s)
    bn, _ = _bn_normalize(x4, s, update=True)
    gn, _ = _gn_normalize(x4, s.groups, s.eps_norm)
    out = _affine(sigmoid_forward(s.rho) * gn + bn, s)
    return out[:, :, 0, 0] if flat else out


def norm_forward(x, s: NormState) -> np.ndarray:
    """Dispatch on ``s.mode``; training-mode BN/AGN update running statistics."""
    if s.mode == "BN":
        return batch_norm(x, s)
    if s.mode == "AGN":
        return agn(x, s)
    return group_norm(x, s)


def norm_backward(x, s: NormState, upstream):
    """Return ``(grad_x, (grad_scale, grad_shift), grad_rho)``.

    Batch statistics are recomputed from ``x``; running statistics are not
    touched. ``grad_rho`` is None outside AGN mode. Parameter gradients are also
    accumulated into ``s``.
    """
    x4, flat = _as4(x)
    _check_channels(x4, s)
    g = np.asarray(upstream, dtype=np.float64)
    g4 = g[:, :, None, None] if flat else g
    if g4.shape != x4.shape:
        raise NormError(f"upstream shape {g.shape} != input shape {np.shape(x)}")

    scale = s.affine_scale[None, :, None, None]
    gy = g4 * scale
    grad_rho = None

    if s.mode in ("BN", "AGN"):
        bn, bn_inv = _bn_normalize(x4, s, update=False)
        if s.training:
            grad_bn = _standardize_backward(gy, bn, bn_inv, (0, 2, 3))
        else:
            grad_bn = gy * bn_inv
    if s.mode == "BN":
        y = bn
        grad_x = grad_bn
    elif s.mode == "AGN":
        gate = sigmoid_forward(s.rho)
        gn, gn_inv = _gn_normalize(x4, s.groups, s.eps_norm)
        y = gate * gn + bn
        grad_x = gate * _gn_backward(gy, gn, gn_inv, s.groups) + grad_bn
        grad_rho = float(np.sum(gy * gn)) * gate * (1.0 - gate)
        s.grad_rho += grad_rho
    else:
        gn, gn_inv = _gn_normalize(x4, s.groups, s.eps_norm)
        y = gn
        grad_x = _gn_backward(gy, gn, gn_inv, s.groups)

    grad_scale = (g4 * y).sum(axis=(0, 2, 3))
    grad_shift = g4.sum(axis=(0, 2, 3))
    s.grad_scale += grad_scale
    s.grad_shift += grad_shift
    if flat:
        grad_x = grad_x[:, :, 0, 0]
    return grad_x, (grad_scale, grad_shift), grad_rho


def bn_to_agn_upgrade(bn_state: NormState, groups: int = 4, rho_init: float = -10.0) -> NormState:
    """Turn a trained BN layer into AGN, keeping running stats and affine.

    The only new parameter is the gate logit ``rho``; with the default -10 the
    layer initially reproduces BN to within sigmoid(-10) ~ 4.5e-5 of a GN term.
    """
    if bn_state.mode != "BN":
        raise NormError(f"can only upgrade a BN layer, got {bn_state.mode}")
    return NormState(
        mode="AGN",
        channels=bn_state.channels,
        groups=groups,
        running_mean=bn_state.running_mean.copy(),
        running_var=bn_state.running_var.copy(),
        affine_scale=bn_state.affine_scale.copy(),
        affine_shift=bn_state.affine_shift.copy(),
        rho=rho_init,
        momentum=bn_state.momentum,
        eps_norm=bn_state.eps_norm,
        training=bn_state.training,
    )
