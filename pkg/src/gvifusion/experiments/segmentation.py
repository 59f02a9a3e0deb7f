"""Small convolutional segmentation study comparing four input/normalization variants.

    baseline  NRGB -> net
    vi        NRGB + 12 fixed vegetation indices -> net
    gvi       NRGB + learnable GVI channels -> net
    agn       as gvi; after a BN warm-up every BN layer becomes AGN (rho = -10)

The net is ``depth`` blocks of 3x3 conv -> norm -> ReLU followed by a 1x1
classification head and a per-pixel softmax.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from gvifusion import diffcore, gvi, losses, metrics, norm
from gvifusion.diffcore import AdamState, ConvFilter, DivergenceError
from gvifusion.experiments.schedule import TrainSchedule, cosine_lr, early_stop
from gvifusion.experiments.synth import CLASS_NAMES, SynthSpec, synth_dataset
from gvifusion.indices import FUSION_KINDS, ViParams, vci_stats, vi_from_bands

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "vi", "gvi", "agn")
VARIANT_LABELS = {
    "baseline": "Baseline",
    "vi": "Baseline + VI",
    "gvi": "Baseline + GVI",
    "agn": "AGN",
}


def parse_variant(name: str) -> str:
    key = name.lower().lstrip("+").replace("baseline+", "")
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return key


@dataclass(frozen=True)
class SegConfig:
    epochs: int = 20
    batch_size: int = 16
    width: int = 8
    depth: int = 3
    gvi_channels: int = 12
    gvi_clip_eps: float = 1e-2
    gvi_ndvi_init: bool = True
    agn_groups: int = 4
    agn_rho_init: float = -10.0
    warmup_fraction: float = 1.0 / 3.0
    val_fraction: float = 0.2
    restore_best: bool = True


@dataclass
class SegResult:
    variant: str
    seed: int
    miou: float
    class_iou: np.ndarray
    counts: tuple
    history: list = field(default_factory=list)  # dicts: epoch, loss, val_loss, lr, miou, class_iou
    best_epoch: int = -1
    gvi_grad_norms: list = field(default_factory=list)


class SegNet:
    def __init__(self, variant: str, in_channels: int, n_classes: int, config: SegConfig, rng):
        self.variant = variant
        self.gvi = None
        if variant in ("gvi", "agn"):
            self.gvi = gvi.gvi_init(config.gvi_channels, k=1, seed=int(rng.integers(2**31)),
                                    clip_eps=config.gvi_clip_eps,
                                    ndvi_channel=config.gvi_ndvi_init)
            in_channels = 4 + config.gvi_channels
        self.convs, self.norms = [], []
        c = in_channels
        for _ in range(config.depth):
            self.convs.append(ConvFilter.random(config.width, c, 3, rng))
            self.norms.append(norm.NormState("BN", config.width))
            c = config.width
        self.head = ConvFilter.random(n_classes, c, 1, rng)
        self.rhos = []

    def upgrade_to_agn(self, groups, rho_init):
        self.norms = [norm.bn_to_agn_upgrade(s, groups, rho_init) for s in self.norms]
        self.rhos = [np.array(s.rho) for s in self.norms]

    def zero_grad(self):
        if self.gvi is not None:
            self.gvi.zero_grad()
        for f in self.convs + [self.head]:
            f.zero_grad()
        for s in self.norms:
            s.zero_grad()

    def parameters(self):
        """``(param, grad)`` pairs in a fixed order; rho grads are filled by ``backward``."""
        pairs = []
        if self.gvi is not None:
            pairs += self.gvi.parameters()
        for f, s in zip(self.convs, self.norms):
            pairs += f.parameters()
            pairs += [(s.affine_scale, s.grad_scale), (s.affine_shift, s.grad_shift)]
        pairs += self.head.parameters()
        return pairs

    def forward(self, x, training: bool):
        cache = {"x": x}
        if self.gvi is not None:
            h = gvi.gvi_fuse(self.gvi, x)
        else:
            h = x
        acts = []
        for i, (f, s) in enumerate(zip(self.convs, self.norms)):
            s.training = training
            if self.rhos:
                s.rho = float(self.rhos[i])
            a = diffcore.conv2d_forward(h, f)
            b = norm.norm_forward(a, s)
            acts.append((h, a, b))
            h = diffcore.relu_forward(b)
        logits = diffcore.conv2d_forward(h, self.head)
        cache["acts"] = acts
        cache["last"] = h
        self._cache = cache
        return logits

    def backward(self, grad_logits):
        """Accumulate parameter gradients; returns the rho gradients (AGN only)."""
        cache = self._cache
        self.zero_grad()
        g, _, _ = diffcore.conv2d_backward(cache["last"], self.head, grad_logits)
        rho_grads = [0.0] * len(self.norms)
        for i in reversed(range(len(self.convs))):
            h, a, b = cache["acts"][i]
            g = diffcore.relu_backward(b, g)
            g, _, grad_rho = norm.norm_backward(a, self.norms[i], g)
            if grad_rho is not None:
                rho_grads[i] = grad_rho
            need_x = i > 0 or self.gvi is not None
            g, _, _ = diffcore.conv2d_backward(h, self.convs[i], g, need_grad_x=need_x)
        if self.gvi is not None:
            gvi.gvi_backward(self.gvi, cache["x"], g[:, 4:], need_grad_x=False)
        return rho_grads


def _vi_features(images, params):
    """NRGB plus the twelve fusion indices, ``[N, 16, H, W]``."""
    planes = np.stack([im.planes for im in images])
    vis = [vi_from_bands(k, planes[:, 0], planes[:, 1], planes[:, 2], planes[:, 3], params)
           for k in FUSION_KINDS]
    return np.concatenate([planes, np.stack(vis, axis=1)], axis=1)


def prepare_inputs(variant, train_images, val_images):
    """Input tensors for a variant; index channels are standardized with training statistics."""
    if variant != "vi":
        return (np.stack([im.planes for im in train_images]),
                np.stack([im.planes for im in val_images]))
    lo, hi = vci_stats(train_images)
    params = ViParams().with_vci_stats(lo, hi)
    xtr = _vi_features(train_images, params)
    xva = _vi_features(val_images, params)
    mask = np.stack([im.valid_mask for im in train_images])
    vals = np.moveaxis(xtr[:, 4:], 1, -1)[mask]
    mu, sd = vals.mean(axis=0), vals.std(axis=0)
    sd[sd == 0] = 1.0
    for x in (xtr, xva):
        x[:, 4:] = (x[:, 4:] - mu[None, :, None, None]) / sd[None, :, None, None]
    return xtr, xva


def _split(n, val_fraction, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _evaluate(net, x, labels, valid, batch_size):
    preds = []
    loss_sum, count = 0.0, 0
    for s in range(0, len(x), batch_size):
        logits = net.forward(x[s:s + batch_size], training=False)
        probs = diffcore.softmax_forward(logits)
        t, v = labels[s:s + batch_size], valid[s:s + batch_size]
        n_valid = int(v.sum())
        if n_valid:
            loss_sum += losses.combined_loss(probs, t, v) * n_valid
            count += n_valid
        preds.append(probs.argmax(axis=1))
    preds = np.concatenate(preds)
    counts = metrics.iou_counts(preds, labels, valid)
    return loss_sum / max(count, 1), counts


def toy_segmentation_experiment(variant: str, spec: SynthSpec = SynthSpec(),
                                schedule: TrainSchedule = TrainSchedule(), seed: int = 0,
                                config: SegConfig = SegConfig(), dataset=None) -> SegResult:
    """Train one variant on synthetic scenes; report overlap-aware IoU on the held-out split.

    With ``config.restore_best`` the weights from the epoch with the lowest
    validation loss are evaluated, as early stopping usually does.
    """
    variant = parse_variant(variant)
    images, grids = dataset if dataset is not None else synth_dataset(spec)
    tr_idx, va_idx = _split(len(images), config.val_fraction, spec.seed)
    train_images = [images[i] for i in tr_idx]
    val_images = [images[i] for i in va_idx]
    xtr, xva = prepare_inputs(variant, train_images, val_images)
    ytr = np.stack([grids[i].labels for i in tr_idx])
    yva = np.stack([grids[i].labels for i in va_idx])
    vtr = np.stack([grids[i].valid_mask for i in tr_idx])
    vva = np.stack([grids[i].valid_mask for i in va_idx])
    n_classes = ytr.shape[1]

    rng = np.random.default_rng(seed)
    net = SegNet(variant, xtr.shape[1], n_classes, config, rng)
    state = AdamState(lr=schedule.base_lr, weight_decay=schedule.weight_decay)
    warmup = int(round(config.epochs * config.warmup_fraction)) if variant == "agn" else None
    result = SegResult(variant, seed, float("nan"), None, None)
    val_losses = []
    bs = config.batch_size

    for epoch in range(config.epochs):
        if epoch == warmup:
            net.upgrade_to_agn(config.agn_groups, config.agn_rho_init)
            # rho joins the optimizer with fresh moments
            state.m += [np.zeros(()) for _ in net.rhos]
            state.v += [np.zeros(()) for _ in net.rhos]
        state.lr = cosine_lr(epoch, schedule)
        order = rng.permutation(len(xtr))
        epoch_loss, seen = 0.0, 0
        gvi_norm = 0.0
        for s in range(0, len(order), bs):
            idx = order[s:s + bs]
            if len(idx) < 2:
                continue
            logits = net.forward(xtr[idx], training=True)
            probs = diffcore.softmax_forward(logits)
            loss = losses.combined_loss(probs, ytr[idx], vtr[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            grad_p = losses.combined_loss_backward(probs, ytr[idx], vtr[idx])
            grad_logits = diffcore.softmax_backward(logits, grad_p)
            rho_grads = net.backward(grad_logits)
            pairs = net.parameters()
            params = [p for p, _ in pairs] + net.rhos
            grads = [g for _, g in pairs] + [np.array(r) for r in rho_grads[:len(net.rhos)]]
            if net.gvi is not None:
                gvi_norm += float(np.sqrt(sum(np.sum(g * g) for _, g in net.gvi.parameters())))
            diffcore.adam_update(params, grads, state)
            epoch_loss += loss * len(idx)
            seen += len(idx)

        val_loss, counts = _evaluate(net, xva, yva, vva, bs)
        class_iou, miou = metrics.iou_from_counts(*counts)
        result.history.append({"epoch": epoch, "loss": epoch_loss / seen, "val_loss": val_loss,
                               "lr": state.lr, "miou": miou, "class_iou": class_iou})
        if config.restore_best and (not val_losses or val_loss < min(val_losses)):
            net._cache = None
            best, result.best_epoch = copy.deepcopy(net), epoch
        result.gvi_grad_norms.append(gvi_norm)
        log.debug("%s seed=%d epoch=%d loss=%.4f val=%.4f miou=%.4f",
                  variant, seed, epoch, epoch_loss / seen, val_loss, miou)
        val_losses.append(val_loss)
        if early_stop(val_losses, schedule.patience):
            break

    if config.restore_best:
        net = best
    else:
        result.best_epoch = len(result.history) - 1
    _, counts = _evaluate(net, xva, yva, vva, bs)
    result.counts = counts
    result.class_iou, result.miou = metrics.iou_from_counts(*counts)
    return result


__all__ = [
    "CLASS_NAMES", "SegConfig", "SegNet", "SegResult", "VARIANTS", "VARIANT_LABELS",
    "parse_variant", "prepare_inputs", "toy_segmentation_experiment",
]
