"""Per-pixel index fitting: a two-layer dense net with BN or AGN after the hidden layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gvifusion import diffcore, norm
from gvifusion.diffcore import AdamState, Dense, DivergenceError
from gvifusion.experiments.synth import SynthSpec, sample_pixels, synth_dataset
from gvifusion.indices import ViKind, ViParams, vi_from_bands


@dataclass(frozen=True)
class FitConfig:
    target_vi: ViKind = ViKind.NDVI
    norm_mode: str = "BN"
    batch_size: int = 16
    hidden_width: int = 16
    groups: int = 4
    rho_init: float = 0.0
    epochs: int = 4
    lr: float = 0.01
    min_lr: float = 1e-4
    weight_decay: float = 0.0
    standardize_inputs: bool = True
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target_vi", ViKind.parse(self.target_vi))
        object.__setattr__(self, "norm_mode", self.norm_mode.upper())
        if self.norm_mode not in ("BN", "AGN"):
            raise ValueError(f"norm_mode must be BN or AGN, got {self.norm_mode}")
        if min(self.batch_size, self.hidden_width, self.epochs) < 1 or self.lr <= 0:
            raise ValueError("batch_size, hidden_width, epochs and lr must be positive")
        if self.hidden_width % self.groups:
            raise ValueError("hidden_width must be divisible by groups")


@dataclass
class PixelData:
    x_train: np.ndarray  # [n, 4] NIR, R, G, B
    x_test: np.ndarray
    params: ViParams  # carries VCI extrema taken from the training pixels

    def targets(self, kind, split="train") -> np.ndarray:
        x = self.x_train if split == "train" else self.x_test
        return vi_from_bands(kind, x[:, 0], x[:, 1], x[:, 2], x[:, 3], self.params)


def pixel_data(n_train=4096, n_test=2048, seed=0, n_images=40) -> PixelData:
    images, _ = synth_dataset(SynthSpec(n_images=n_images, seed=seed))
    half = n_images // 2
    x_train = sample_pixels(images[:half], n_train, seed=seed + 1)
    x_test = sample_pixels(images[half:], n_test, seed=seed + 2)
    ndvi = vi_from_bands(ViKind.NDVI, *x_train.T)
    params = ViParams().with_vci_stats(ndvi.min(), ndvi.max())
    return PixelData(x_train, x_test, params)


def relative_error_pct(pred, target) -> float:
    """100 * mean absolute error / standard deviation of the target."""
    target = np.asarray(target, dtype=np.float64)
    std = target.std()
    if not std > 0:
        raise ValueError("target is constant; relative error undefined")
    return float(100.0 * np.mean(np.abs(np.asarray(pred) - target)) / std)


class FitNet:
    """4 -> hidden (dense) -> BN or AGN -> ReLU -> 1 (dense)."""

    def __init__(self, config: FitConfig, rng):
        h = config.hidden_width
        self.l1 = Dense.random(4, h, rng)
        self.l2 = Dense.random(h, 1, rng)
        if config.norm_mode == "AGN":
            self.norm = norm.NormState("AGN", h, groups=config.groups, rho=config.rho_init,
                                       momentum=config.bn_momentum)
        else:
            self.norm = norm.NormState("BN", h, momentum=config.bn_momentum)
        self.rho = np.array(self.norm.rho)

    def parameters(self):
        pairs = self.l1.parameters() + self.l2.parameters()
        pairs += [(self.norm.affine_scale, self.norm.grad_scale),
                  (self.norm.affine_shift, self.norm.grad_shift)]
        return pairs

    def forward(self, x, training):
        self.norm.training = training
        self.norm.rho = float(self.rho)
        a1 = diffcore.dense_forward(x, self.l1)
        a2 = norm.norm_forward(a1, self.norm)
        a3 = diffcore.relu_forward(a2)
        out = diffcore.dense_forward(a3, self.l2)[:, 0]
        self._cache = (x, a1, a2, a3)
        return out

    def backward(self, grad_out):
        x, a1, a2, a3 = self._cache
        for layer in (self.l1, self.l2):
            layer.zero_grad()
        self.norm.zero_grad()
        g3, _, _ = diffcore.dense_backward(a3, self.l2, grad_out[:, None])
        g2 = diffcore.relu_backward(a2, g3)
        g1, _, grad_rho = norm.norm_backward(a1, self.norm, g2)
        diffcore.dense_backward(x, self.l1, g1)
        return grad_rho


def train_fit(config: FitConfig, data: PixelData):
    """Train on standardized targets; return ``(net, predictions on test, test targets)``."""
    rng = np.random.default_rng(config.seed)
    y_train = data.targets(config.target_vi, "train")
    y_test = data.targets(config.target_vi, "test")
    mu, sd = y_train.mean(), y_train.std()
    if not sd > 0:
        raise ValueError(f"{config.target_vi.name} is constant on the training pixels")
    z_train = (y_train - mu) / sd

    x_train, x_test = data.x_train, data.x_test
    if config.standardize_inputs:
        x_mu, x_sd = x_train.mean(axis=0), x_train.std(axis=0)
        x_train = (x_train - x_mu) / x_sd
        x_test = (x_test - x_mu) / x_sd

    net = FitNet(config, rng)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    n = len(z_train)
    bs = config.batch_size
    agn = config.norm_mode == "AGN"
    total = config.epochs * (n // bs)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            # one cosine decay from lr to min_lr over the whole run
            state.lr = config.min_lr + 0.5 * (config.lr - config.min_lr) * (
                1.0 + np.cos(np.pi * state.step / total))
            idx = order[start:start + bs]
            pred = net.forward(x_train[idx], training=True)
            resid = pred - z_train[idx]
            if not np.all(np.isfinite(resid)):
                raise DivergenceError("non-finite prediction during fitting")
            grad_rho = net.backward(np.sign(resid) / bs)
            pairs = net.parameters()
            params = [p for p, _ in pairs]
            grads = [g for _, g in pairs]
            if agn:
                params.append(net.rho)
                grads.append(np.array(grad_rho))
            diffcore.adam_update(params, grads, state)

    pred_test = net.forward(x_test, training=False) * sd + mu
    if not np.all(np.isfinite(pred_test)):
        raise DivergenceError("non-finite predictions on held-out pixels")
    return net, pred_test, y_test


def fit_vi_experiment(config: FitConfig, data: PixelData | None = None) -> float:
    """Relative L1 error (%) of the fitted net on held-out pixels."""
    if data is None:
        data = pixel_data(seed=config.seed)
    _, pred, target = train_fit(config, data)
    return relative_error_pct(pred, target)
