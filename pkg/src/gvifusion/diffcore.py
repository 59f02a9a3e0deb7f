"""A small differentiable-operations core in float64 numpy.

Every operation is a forward/backward pair of plain functions. Backward
functions return gradients and, where a parameter container is involved,
also accumulate into that container's gradient buffers. There is no tape:
callers chain backward calls themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DivergenceError(FloatingPointError):
    """A non-finite value reached the optimizer or a loss."""


def _arr(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor4) else np.asarray(x, dtype=np.float64)


class Tensor4:
    """Rank-4 ``[N, C, H, W]`` float64 array with a gradient buffer of the same shape."""

    def __init__(self, values, grad=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dimensions, got shape {values.shape}")
        self.values = values
        if grad is None:
            grad = np.zeros_like(values)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != values.shape:
            raise ValueError(f"grad shape {grad.shape} != values shape {values.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"Tensor4(shape={self.shape})"


@dataclass
class ConvFilter:
    weight: np.ndarray  # [C_out, C_in, k, k]
    bias: np.ndarray  # [C_out]
    grad_weight: np.ndarray = None
    grad_bias: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"filter weight must be [C_out, C_in, k, k], got {self.weight.shape}")
        if self.weight.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def zeros(cls, c_out, c_in, k=1):
        return cls(np.zeros((c_out, c_in, k, k)), np.zeros(c_out))

    @classmethod
    def random(cls, c_out, c_in, k, rng, scale=None):
        if scale is None:
            scale = np.sqrt(2.0 / (c_in * k * k))
        return cls(rng.normal(0.0, scale, (c_out, c_in, k, k)), np.zeros(c_out))

    def copy(self) -> "ConvFilter":
        return ConvFilter(self.weight.copy(), self.bias.copy())

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


def _pad_width(k: int, padding: str) -> int:
    if padding == "same":
        return k // 2
    if padding == "valid":
        return 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _correlate(x, weight, p):
    k = weight.shape[2]
    if k == 1:
        return np.einsum("oc,nchw->nohw", weight[:, :, 0, 0], x, optimize=True)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))  # n c h w i j
    return np.einsum("nchwij,ocij->nohw", patches, weight, optimize=True)


def conv2d_forward(x, f: ConvFilter, padding: str = "same") -> np.ndarray:
    """Cross-correlation of ``x`` with ``f`` plus bias (stride 1, no dilation)."""
    x = _arr(x)
    if x.ndim != 4 or x.shape[1] != f.c_in:
        raise ValueError(f"input shape {x.shape} incompatible with filter C_in={f.c_in}")
    out = _correlate(x, f.weight, _pad_width(f.k, padding))
    return out + f.bias[None, :, None, None]


def conv2d_backward(x, f: ConvFilter, upstream, padding: str = "same", need_grad_x: bool = True):
    """Return ``(grad_x, grad_weight, grad_bias)`` and accumulate into ``f``.

    ``grad_x`` is None when ``need_grad_x`` is false (e.g. for a data input).
    """
    x = _arr(x)
    g = _arr(upstream)
    k = f.k
    p = _pad_width(k, padding)
    n, _, h, w = x.shape
    out_shape = (n, f.c_out, h + 2 * p - k + 1, w + 2 * p - k + 1)
    if g.shape != out_shape:
        raise ValueError(f"upstream shape {g.shape} != forward output shape {out_shape}")

    grad_b = g.sum(axis=(0, 2, 3))
    if k == 1:
        grad_w = np.einsum("nohw,nchw->oc", g, x, optimize=True)[:, :, None, None]
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        patches = sliding_window_view(xp, (k, k), axis=(2, 3))
        grad_w = np.einsum("nohw,nchwij->ocij", g, patches, optimize=True)
    grad_x = None
    if need_grad_x:
        # adjoint of a stride-1 correlation: correlate upstream with the flipped,
        # channel-transposed kernel, padding by k - 1 - p
        flipped = np.ascontiguousarray(f.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = _correlate(g, flipped, k - 1 - p)

    f.grad_weight += grad_w
    f.grad_bias += grad_b
    return grad_x, grad_w, grad_b


def clip_denominator(den, clip_eps):
    sign = np.where(den >= 0.0, 1.0, -1.0)
    return sign * np.maximum(np.abs(den), clip_eps)


def safe_div_forward(num, den, clip_eps: float) -> np.ndarray:
    """``num' / den'`` with den' = sign(den)·max(|den|, eps), num' = clamp(num, ±1/eps).

    sign(0) is taken as +1, so the result is finite for every finite input.
    """
    num, den = _arr(num), _arr(den)
    if num.shape != den.shape:
        raise ValueError(f"shape mismatch {num.shape} vs {den.shape}")
    if clip_eps <= 0:
        raise ValueError("clip_eps must be positive")
    bound = 1.0 / clip_eps
    return np.clip(num, -bound, bound) / clip_denominator(den, clip_eps)


def safe_div_backward(num, den, upstream, clip_eps: float):
    """Gradients of the clipped quotient; saturated operands get zero gradient."""
    num, den, g = _arr(num), _arr(den), _arr(upstream)
    if not (num.shape == den.shape == g.shape):
        raise ValueError(f"shape mismatch {num.shape}, {den.shape}, {g.shape}")
    bound = 1.0 / clip_eps
    num_c = np.clip(num, -bound, bound)
    den_c = clip_denominator(den, clip_eps)
    num_live = np.abs(num) <= bound
    den_live = np.abs(den) >= clip_eps
    grad_num = np.where(num_live, g / den_c, 0.0)
    grad_den = np.where(den_live, -g * num_c / (den_c * den_c), 0.0)
    return grad_num, grad_den


@dataclass
class Dense:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    grad_weight: np.ndarray = None
    grad_bias: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad dense shapes {self.weight.shape}, {self.bias.shape}")
        if self.grad_weight is None:
            self.grad_weight = np.zeros_like(self.weight)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def random(cls, n_in, n_out, rng):
        bound = 1.0 / np.sqrt(n_in)
        return cls(rng.uniform(-bound, bound, (n_out, n_in)), rng.uniform(-bound, bound, n_out))

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def parameters(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]


def dense_forward(x, layer: Dense) -> np.ndarray:
    x = _arr(x)
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise ValueError(f"input shape {x.shape} incompatible with weight {layer.weight.shape}")
    return x @ layer.weight.T + layer.bias


def dense_backward(x, layer: Dense, upstream):
    x, g = _arr(x), _arr(upstream)
    if g.shape != (x.shape[0], layer.weight.shape[0]):
        raise ValueError(f"upstream shape {g.shape} does not match dense output")
    grad_w = g.T @ x
    grad_b = g.sum(axis=0)
    layer.grad_weight += grad_w
    layer.grad_bias += grad_b
    return g @ layer.weight, grad_w, grad_b


def relu_forward(x) -> np.ndarray:
    return np.maximum(_arr(x), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(_arr(x) > 0.0, _arr(upstream), 0.0)


def sigmoid_forward(x):
    x = np.asarray(_arr(x), dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_backward(x, upstream):
    s = sigmoid_forward(x)
    return _arr(upstream) * s * (1.0 - s)


def softmax_forward(x, axis: int = 1) -> np.ndarray:
    x = _arr(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(x, upstream, axis: int = 1) -> np.ndarray:
    s = softmax_forward(x, axis)
    g = _arr(upstream)
    return s * (g - (g * s).sum(axis=axis, keepdims=True))


@dataclass
class AdamState:
    lr: float = 0.01
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(params, grads, state: AdamState):
    """One Adam step with decoupled weight decay, updating ``params`` in place.

    Raises DivergenceError when any gradient is non-finite.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state


def finite_diff_check(forward, backward, inputs, h: float = 1e-5, rng=None, wrt=None) -> float:
    """Worst relative error between analytic and central-difference directional derivatives.

    ``forward(*inputs)`` returns an array (or scalar); ``backward(*inputs, upstream)``
    returns one gradient per input (``None`` for non-differentiable ones). For each
    checked input a random direction ``v`` and random upstream ``u`` are drawn and
    ``<grad, v>`` is compared with ``(<u, f(x+hv)> - <u, f(x-hv)>) / 2h``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [np.array(_arr(a), dtype=np.float64) for a in inputs]
    base = np.asarray(forward(*inputs), dtype=np.float64)
    u = rng.standard_normal(base.shape)
    grads = backward(*inputs, u if base.ndim else float(u))
    if not isinstance(grads, (tuple, list)):
        grads = (grads,)
    indices = range(len(inputs)) if wrt is None else wrt

    worst = 0.0
    for i in indices:
        if i >= len(grads) or grads[i] is None:
            continue
        v = rng.standard_normal(inputs[i].shape)
        analytic = float(np.sum(np.asarray(grads[i]) * v))
        plus = [a.copy() for a in inputs]
        minus = [a.copy() for a in inputs]
        plus[i] += h * v
        minus[i] -= h * v
        fp = np.asarray(forward(*plus), dtype=np.float64)
        fm = np.asarray(forward(*minus), dtype=np.float64)
        numeric = float(np.sum(u * (fp - fm))) / (2.0 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def extend_input_channels(f: ConvFilter, source_channel: int, new_position: int) -> ConvFilter:
    """Insert a new input channel at ``new_position`` holding a copy of ``source_channel``.

    ``source_channel`` indexes the original filter; the copy is taken before insertion.
    """
    if not 0 <= source_channel < f.c_in:
        raise IndexError(f"source_channel {source_channel} out of range for {f.c_in} inputs")
    if not 0 <= new_position <= f.c_in:
        raise IndexError(f"new_position {new_position} out of range 0..{f.c_in}")
    src = f.weight[:, source_channel:source_channel + 1]
    weight = np.concatenate([f.weight[:, :new_position], src, f.weight[:, new_position:]], axis=1)
    return ConvFilter(weight, f.bias.copy())
