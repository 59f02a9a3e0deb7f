"""Learnable ratio-of-convolutions fusion layer over NRGB input."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gvifusion import diffcore
from gvifusion.diffcore import ConvFilter
from gvifusion.indices import ViError, ViKind, ViParams

DEFAULT_CHANNELS = 12


@dataclass
class GviLayer:
    alpha: ConvFilter  # numerator
    beta: ConvFilter  # denominator
    clip_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha.weight.shape != self.beta.weight.shape:
            raise ValueError(
                f"alpha {self.alpha.weight.shape} and beta {self.beta.weight.shape} differ"
            )
        if self.alpha.c_in != 4:
            raise ValueError(f"GVI filters take 4 input channels, got {self.alpha.c_in}")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")

    @property
    def channels(self) -> int:
        return self.alpha.c_out

    @property
    def k(self) -> int:
        return self.alpha.k

    def zero_grad(self):
        self.alpha.zero_grad()
        self.beta.zero_grad()

    def parameters(self):
        return self.alpha.parameters() + self.beta.parameters()


def gvi_forward(layer: GviLayer, x) -> np.ndarray:
    """``safe_div(x * alpha, x * beta)`` with same padding; output ``[N, m, H, W]``."""
    x = diffcore._arr(x)
    if x.ndim != 4 or x.shape[1] != 4:
        raise ValueError(f"GVI input must be [N, 4, H, W] in NIR,R,G,B order, got {x.shape}")
    num = diffcore.conv2d_forward(x, layer.alpha)
    den = diffcore.conv2d_forward(x, layer.beta)
    return diffcore.safe_div_forward(num, den, layer.clip_eps)


def gvi_backward(layer: GviLayer, x, upstream, need_grad_x: bool = True):
    """Return ``(grad_x, (grad_alpha_w, grad_alpha_b), (grad_beta_w, grad_beta_b))``.

    Filter gradients are also accumulated into ``layer``. ``grad_x`` is None
    when ``need_grad_x`` is false.
    """
    x = diffcore._arr(x)
    num = diffcore.conv2d_forward(x, layer.alpha)
    den = diffcore.conv2d_forward(x, layer.beta)
    g = diffcore._arr(upstream)
    if g.shape != num.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {num.shape}")
    g_num, g_den = diffcore.safe_div_backward(num, den, g, layer.clip_eps)
    gx_a, gw_a, gb_a = diffcore.conv2d_backward(x, layer.alpha, g_num, need_grad_x=need_grad_x)
    gx_b, gw_b, gb_b = diffcore.conv2d_backward(x, layer.beta, g_den, need_grad_x=need_grad_x)
    grad_x = gx_a + gx_b if need_grad_x else None
    return grad_x, (gw_a, gb_a), (gw_b, gb_b)


def gvi_fuse(layer: GviLayer, x) -> np.ndarray:
    """NRGB input with the GVI channels appended: ``[N, 4 + m, H, W]``."""
    x = diffcore._arr(x)
    return np.concatenate([x, gvi_forward(layer, x)], axis=1)


def gvi_init(m: int = DEFAULT_CHANNELS, k: int = 1, seed=0, clip_eps: float = 1e-6,
             ndvi_channel: bool = False) -> GviLayer:
    """Random layer whose denominators start close to one.

    Beta weights are bounded by ``0.1 / k**2`` so on inputs in [0, 1] every
    denominator stays inside [0.6, 1.4] at initialization.
    """
    if m < 1:
        raise ValueError(f"need at least one output channel, got {m}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    rng = np.random.default_rng(seed)
    alpha = ConvFilter(rng.normal(0.0, 0.1, (m, 4, k, k)), np.zeros(m))
    bound = 0.1 / (k * k)
    beta = ConvFilter(rng.uniform(-bound, bound, (m, 4, k, k)), np.ones(m))
    if ndvi_channel:
        a, b = express_vi(ViKind.NDVI)
        c = k // 2
        alpha.weight[0] = 0.0
        beta.weight[0] = 0.0
        alpha.weight[0, :, c, c] = a.weight[0, :, 0, 0]
        beta.weight[0, :, c, c] = b.weight[0, :, 0, 0]
        alpha.bias[0] = a.bias[0]
        beta.bias[0] = b.bias[0]
    return GviLayer(alpha, beta, clip_eps)


def _coefficients(kind: ViKind, params: ViParams):
    # (bias, NIR, R, G, B) for numerator and denominator
    if kind is ViKind.NDVI:
        return (0, 1, -1, 0, 0), (0, 1, 1, 0, 0)
    if kind is ViKind.IAVI:
        gm = params.gamma
        return (0, 1, -(1 + gm), 0, gm), (0, 1, 1 + gm, 0, -gm)
    if kind is ViKind.EVI:
        return (0, 2.5, -2.5, 0, 0), (1, 1, 6, 0, -7.5)
    if kind is ViKind.VDVI:
        return (0, 0, -2, 4, -2), (0, 0, 1, 2, 1)
    if kind is ViKind.WDRVI:
        return (0, 0.2, -1, 0, 0), (0, 0.2, 1, 0, 0)
    if kind is ViKind.GDVI:
        return (0, 1, 0, -1, 0), (1, 0, 0, 0, 0)
    if kind is ViKind.SAVI:
        L = params.L
        return (0, 1 + L, -(1 + L), 0, 0), (L, 1, 1, 0, 0)
    if kind is ViKind.RVI:
        return (0, 0, 1, 0, 0), (0, 1, 0, 0, 0)
    if kind is ViKind.GRVI:
        return (0, 1, 0, 0, 0), (0, 0, 0, 1, 0)
    if kind is ViKind.NDGI:
        return (0, 0, -1, 1, 0), (0, 0, 1, 1, 0)
    raise ViError(f"{kind.name} is not expressible as a ratio of affine band combinations")


EXPRESSIBLE_KINDS = tuple(
    k for k in ViKind if k not in (ViKind.MSAVI2, ViKind.MCARI, ViKind.VCI)
)


def express_vi(kind, params: ViParams = ViParams()) -> tuple[ConvFilter, ConvFilter]:
    """Fixed 1x1 numerator/denominator filters that reproduce a rational index."""
    kind = ViKind.parse(kind)
    num, den = _coefficients(kind, params)
    alpha = ConvFilter(np.array(num[1:], dtype=np.float64).reshape(1, 4, 1, 1), [num[0]])
    beta = ConvFilter(np.array(den[1:], dtype=np.float64).reshape(1, 4, 1, 1), [den[0]])
    return alpha, beta


def layer_from_vi(kind, params: ViParams = ViParams()) -> GviLayer:
    alpha, beta = express_vi(kind, params)
    return GviLayer(alpha, beta, params.clip_eps)
