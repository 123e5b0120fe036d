"""Training objectives: focal loss, hybrid intensity loss, geodesic alignment."""
from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import Network, Segmenter, bin_edges, bin_references
from .range_image import RangeImage
from .tensor import Tensor, clip_min, log, log_softmax, logm_sym, matmul, power, softmax, tsum

P_FLOOR = 1e-12


class AllIgnoredWarning(UserWarning):
    """Every pixel of a batch was excluded from a loss."""


@dataclass
class LossConfig:
    gamma: float = 2.0
    lam: float = 10.0
    n_bins: int = 10
    epsilon_cov: float = 1e-5
    feature_rows: int = 1024
    regression_bin: str = "true"  # or "predicted"

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("gamma and lambda must be non-negative")
        if self.epsilon_cov <= 0:
            raise ValueError("epsilon_cov must be positive")
        if self.regression_bin not in ("true", "predicted"):
            raise ValueError("regression_bin must be 'true' or 'predicted'")

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.n_bins)

    @property
    def references(self) -> np.ndarray:
        return bin_references(self.edges)


def _onehot(labels: np.ndarray, n: int, axis: int) -> np.ndarray:
    oh = np.eye(n)[labels.astype(np.int64)]  # (..., n)
    return np.moveaxis(oh, -1, axis)


def focal_loss(probs: Tensor, labels: np.ndarray, ignore: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_t)**gamma * log(p_t)`` over non-ignored pixels.

    ``probs`` is (C, H, W) or (N, C, H, W); ``labels``/``ignore`` drop the class axis.
    """
    class_axis = probs.ndim - 3
    valid = (np.asarray(ignore) == 0).astype(np.float64)
    count = valid.sum()
    if count == 0:
        warnings.warn("focal loss: all pixels ignored, returning 0", AllIgnoredWarning, stacklevel=2)
        return tsum(probs * 0.0)
    onehot = _onehot(np.asarray(labels), probs.shape[class_axis], class_axis)
    pt = clip_min(tsum(probs * onehot, axis=class_axis), P_FLOOR)
    per_pixel = -log(pt)
    if gamma != 0:
        per_pixel = per_pixel * power(1.0 - pt, gamma)
    return tsum(per_pixel * valid) / count


def cross_entropy(probs: Tensor, labels: np.ndarray, ignore: np.ndarray) -> Tensor:
    return focal_loss(probs, labels, ignore, gamma=0.0)


def intensity_bins(target: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Index of the bin ``[edge_k, edge_k+1)`` holding each target; 1.0 maps to the last bin."""
    n = len(edges) - 1
    return np.clip(np.searchsorted(edges, target, side="right") - 1, 0, n - 1)


def hybrid_intensity_loss(bin_logits: Tensor, deviations: Tensor, target: np.ndarray,
                          mask: np.ndarray, config: LossConfig) -> Tensor:
    """Bin cross entropy plus squared error of reference + deviation, averaged
    over existing pixels. Inputs are (N, n, H, W) with (N, H, W) targets."""
    target = np.asarray(target, dtype=np.float64)
    m = (np.asarray(mask) != 0)
    if np.any((target[m] < 0) | (target[m] > 1)):
        raise ValueError("intensity targets must lie in [0, 1]")
    count = m.sum()
    if count == 0:
        warnings.warn("intensity loss: no existing pixels, returning 0", AllIgnoredWarning, stacklevel=2)
        return tsum(bin_logits * 0.0) + tsum(deviations * 0.0)
    n = config.n_bins
    refs = config.references
    true_bin = intensity_bins(np.where(m, target, 0.0), config.edges)
    onehot_true = _onehot(true_bin, n, 1)
    ce = -tsum(log_softmax(bin_logits, axis=1) * onehot_true, axis=1)
    if config.regression_bin == "true":
        sel_bin, sel = true_bin, onehot_true
    else:
        sel_bin = bin_logits.data.argmax(axis=1)
        sel = _onehot(sel_bin, n, 1)
    pred = refs[sel_bin] + tsum(deviations * sel, axis=1)
    sq = power(pred - target, 2.0)
    mf = m.astype(np.float64)
    return tsum((ce + sq) * mf) / float(count)


def l2_intensity_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error on existing pixels; ``pred`` is (N, 1, H, W)."""
    mf = (np.asarray(mask) != 0).astype(np.float64)
    count = mf.sum()
    if count == 0:
        warnings.warn("intensity loss: no existing pixels, returning 0", AllIgnoredWarning, stacklevel=2)
        return tsum(pred * 0.0)
    diff = pred[:, 0] - np.asarray(target, dtype=np.float64)
    return tsum(power(diff, 2.0) * mf) / float(count)


def covariance(feat: Tensor, epsilon: float) -> Tensor:
    b, d = feat.shape
    centered = feat - feat.mean(axis=0, keepdims=True)
    return matmul(centered.T, centered) / float(b - 1) + epsilon * np.eye(d)


def geodesic_loss(feat_sim: Tensor, feat_real: Tensor, epsilon_cov: float = 1e-5) -> Tensor:
    """Log-Euclidean distance between regularized feature covariances,
    ``||logm(C_s) - logm(C_t)||_F^2 / (4 D^2)``."""
    if feat_sim.ndim != 2 or feat_sim.shape[1:] != feat_real.shape[1:] or feat_real.ndim != 2:
        raise ValueError(f"feature batches must be (B, D) with equal D, got {feat_sim.shape}, {feat_real.shape}")
    if feat_sim.shape[0] < 2 or feat_real.shape[0] < 2:
        raise ValueError("geodesic loss needs at least two rows per batch")
    d = feat_sim.shape[1]
    diff = logm_sym(covariance(feat_sim, epsilon_cov)) - logm_sym(covariance(feat_real, epsilon_cov))
    return tsum(diff * diff) / float(4 * d * d)


def pixel_features(fmap: Tensor, valid: np.ndarray, rows: int, rng: np.random.Generator) -> Tensor:
    """Flatten an (N, D, H, W) map to per-pixel rows, sampling up to ``rows``
    of the pixels flagged in ``valid`` (N, H, W)."""
    n, d, h, w = fmap.shape
    flat = fmap.transpose(0, 2, 3, 1).reshape(n * h * w, d)
    idx = np.flatnonzero(np.asarray(valid).reshape(-1))
    if idx.size < 2:
        idx = np.arange(n * h * w)
    if idx.size > rows:
        idx = np.sort(rng.choice(idx, size=rows, replace=False))
    return flat[idx]


@contextlib.contextmanager
def frozen_running_stats(net: Network):
    bns = [bn for _, bn in net.batchnorms()]
    prev = [bn.state.frozen for bn in bns]
    for bn in bns:
        bn.state.frozen = True
    try:
        yield
    finally:
        for bn, p in zip(bns, prev):
            bn.state.frozen = p


@dataclass
class AdaptationLoss:
    total: Tensor
    focal: Tensor
    geodesic: Tensor | None


def adaptation_loss(model: Segmenter, sim: Sequence[RangeImage], real: Sequence[RangeImage],
                    config: LossConfig, rng: np.random.Generator, feature_layer: str | None = None) -> AdaptationLoss:
    """Focal loss on the labeled synthetic batch plus ``lam`` times the
    geodesic distance between both batches' features at ``feature_layer``.

    The real batch normalizes with its own batch statistics but does not
    move the running statistics. With ``lam == 0`` the real batch is skipped.
    """
    if len(sim) == 0:
        raise ValueError("empty synthetic batch")
    layer = feature_layer or model.spec.feature_layer
    use_gl = config.lam > 0 and len(real) > 0
    keep = [layer] if use_gl else []
    logits, feats = model.logits(sim, "train", keep)
    probs = softmax(logits, axis=1)
    labels = np.stack([im.labels for im in sim])
    ignore = np.stack([im.ignore for im in sim])
    fl = focal_loss(probs, labels, ignore, config.gamma)
    if not use_gl:
        return AdaptationLoss(fl, fl, None)
    if [im.shape for im in real] != [im.shape for im in sim]:
        raise ValueError("synthetic and real batches must share shape")
    with frozen_running_stats(model.net):
        _, feats_real = model.logits(real, "train", keep)
    # one draw seeds both subsamples so identical batches pick identical rows
    sub = int(rng.integers(2**63))
    fs = pixel_features(feats[layer], np.stack([im.mask for im in sim]), config.feature_rows,
                        np.random.default_rng(sub))
    fr = pixel_features(feats_real[layer], np.stack([im.mask for im in real]), config.feature_rows,
                        np.random.default_rng(sub))
    gl = geodesic_loss(fs, fr, config.epsilon_cov)
    return AdaptationLoss(fl + config.lam * gl, fl, gl)
