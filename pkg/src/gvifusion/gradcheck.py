"""Central-difference checks for every differentiable operation in the package.

Each case draws a random point away from kinks and clipping thresholds and
returns the forward function, the backward function and the inputs expected by
``diffcore.finite_diff_check``. Module attributes are looked up at call time so
a patched backward is picked up by the suite.
"""
from __future__ import annotations

import time

import numpy as np

from gvifusion import diffcore, gvi, losses, norm

TOLERANCE = 1e-4


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _conv(k, padding):
    def case(rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((2, 3, k, k))
        b = rng.standard_normal(2)
        fwd = lambda x, w, b: diffcore.conv2d_forward(x, diffcore.ConvFilter(w, b), padding)
        bwd = lambda x, w, b, u: diffcore.conv2d_backward(x, diffcore.ConvFilter(w, b), u, padding)
        return fwd, bwd, [x, w, b]
    return case


def _safe_div(rng):
    eps = 1e-3
    num = rng.uniform(-2.0, 2.0, (3, 4))
    den = rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    fwd = lambda n, d: diffcore.safe_div_forward(n, d, eps)
    bwd = lambda n, d, u: diffcore.safe_div_backward(n, d, u, eps)
    return fwd, bwd, [num, den]


def _dense(rng):
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    fwd = lambda x, w, b: diffcore.dense_forward(x, diffcore.Dense(w, b))
    bwd = lambda x, w, b, u: diffcore.dense_backward(x, diffcore.Dense(w, b), u)
    return fwd, bwd, [x, w, b]


def _relu(rng):
    x = _away_from_zero(rng, (3, 5))
    return (lambda x: diffcore.relu_forward(x),
            lambda x, u: (diffcore.relu_backward(x, u),), [x])


def _sigmoid(rng):
    x = 3.0 * rng.standard_normal((3, 5))
    return (lambda x: diffcore.sigmoid_forward(x),
            lambda x, u: (diffcore.sigmoid_backward(x, u),), [x])


def _softmax(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    return (lambda x: diffcore.softmax_forward(x),
            lambda x, u: (diffcore.softmax_backward(x, u),), [x])


def _norm(mode, training):
    def case(rng):
        c = 4
        s = norm.NormState(mode, c, groups=2, rho=rng.uniform(-2.0, 2.0), training=training,
                           running_mean=rng.standard_normal(c),
                           running_var=rng.uniform(0.5, 2.0, c),
                           affine_scale=rng.standard_normal(c),
                           affine_shift=rng.standard_normal(c))
        x = rng.standard_normal((3, c, 3, 3))

        def configured(scale, shift, rho):
            t = s.copy()
            t.affine_scale, t.affine_shift, t.rho = scale, shift, float(rho)
            return t

        def fwd(x, scale, shift, rho):
            return norm.norm_forward(x, configured(scale, shift, rho))

        def bwd(x, scale, shift, rho, u):
            gx, (gs, gb), gr = norm.norm_backward(x, configured(scale, shift, rho), u)
            return gx, gs, gb, None if gr is None else np.array(gr)

        return fwd, bwd, [x, s.affine_scale.copy(), s.affine_shift.copy(), np.array(s.rho)]
    return case


def _gvi(k):
    def case(rng):
        x = rng.uniform(0.0, 1.0, (2, 4, 4, 4))
        aw = rng.normal(0.0, 0.5, (3, 4, k, k))
        ab = rng.normal(0.0, 0.5, 3)
        bw = rng.uniform(-0.1, 0.1, (3, 4, k, k)) / (k * k)
        bb = np.ones(3)

        def layer(aw, ab, bw, bb):
            return gvi.GviLayer(diffcore.ConvFilter(aw, ab), diffcore.ConvFilter(bw, bb), 1e-3)

        def fwd(x, aw, ab, bw, bb):
            return gvi.gvi_forward(layer(aw, ab, bw, bb), x)

        def bwd(x, aw, ab, bw, bb, u):
            gx, (gaw, gab), (gbw, gbb) = gvi.gvi_backward(layer(aw, ab, bw, bb), x, u)
            return gx, gaw, gab, gbw, gbb

        return fwd, bwd, [x, aw, ab, bw, bb]
    return case


def _targets(rng, shape):
    n, k, h, w = shape
    t = np.zeros(shape, dtype=bool)
    first = rng.integers(0, k, (n, h, w))
    np.put_along_axis(t, first[:, None], True, axis=1)
    second = rng.integers(0, k, (n, h, w))
    extra = rng.random((n, h, w)) < 0.3
    t |= extra[:, None] & (np.arange(k)[None, :, None, None] == second[:, None])
    return t


def _probs_with_margin(rng, shape, targets, margin=1e-3):
    while True:
        p = rng.uniform(0.05, 0.9, shape)
        masked = np.sort(np.where(targets, p, -1.0), axis=1)
        # the best target class must win by a margin so p_t stays on one branch
        if np.all(masked[:, -1] - masked[:, -2] > margin):
            return p


def _loss(kind):
    def case(rng):
        shape = (2, 3, 3, 3)
        t = _targets(rng, shape)
        p = _probs_with_margin(rng, shape, t)
        valid = rng.random((2, 3, 3)) < 0.8
        valid[0, 0, 0] = True
        if kind == "focal":
            return (lambda p: losses.focal_loss(p, t, valid),
                    lambda p, u: (u * losses.focal_loss_backward(p, t, valid),), [p])
        if kind == "dice":
            return (lambda p: losses.dice_loss(p, t, valid),
                    lambda p, u: (u * losses.dice_loss_backward(p, t, valid),), [p])
        return (lambda p: losses.combined_loss(p, t, valid),
                lambda p, u: (u * losses.combined_loss_backward(p, t, valid),), [p])
    return case


CASES = {
    "conv2d_3x3_same": _conv(3, "same"),
    "conv2d_3x3_valid": _conv(3, "valid"),
    "conv2d_1x1": _conv(1, "same"),
    "safe_div": _safe_div,
    "dense": _dense,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "softmax": _softmax,
    "bn_train": _norm("BN", True),
    "bn_eval": _norm("BN", False),
    "gn": _norm("GN", True),
    "in": _norm("IN", True),
    "ln": _norm("LN", True),
    "agn_train": _norm("AGN", True),
    "agn_eval": _norm("AGN", False),
    "gvi_1x1": _gvi(1),
    "gvi_3x3": _gvi(3),
    "focal_loss": _loss("focal"),
    "dice_loss": _loss("dice"),
    "combined_loss": _loss("combined"),
}


def run_suite(seed: int = 0, n_points: int = 100, h: float = 1e-5, names=None):
    """Worst relative error per operation over ``n_points`` random points.

    Returns a list of ``(name, worst_error, seconds)``.
    """
    report = []
    for name in names or CASES:
        case = CASES[name]
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(n_points):
            fwd, bwd, inputs = case(rng)
            worst = max(worst, diffcore.finite_diff_check(fwd, bwd, inputs, h=h, rng=rng))
        report.append((name, worst, time.perf_counter() - start))
    return report
