"""Domain adaptation pipeline: intensity rendering, correlation-aligned
training, and progressive batch-norm calibration."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .losses import LossConfig, adaptation_loss, hybrid_intensity_loss, l2_intensity_loss
from .network import BatchNorm, Network, Renderer, Segmenter
from .range_image import IoUAccumulator, RangeImage
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    grad_clip: float | None = 5.0
    weight_decay: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    feature_layer: str | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


class SGD:
    """Heavy-ball SGD with optional global-norm gradient clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 grad_clip: float | None = None, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.grad_clip, self.weight_decay = lr, momentum, grad_clip, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        for p, g, v in zip(self.params, grads, self.velocity):
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
        return norm


class BatchSampler:
    """Shuffled epochs drawn from a dedicated RNG stream; batch order depends
    on the seed only."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("cannot sample batches from an empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx


def _streams(seed: int) -> tuple[np.random.Generator, ...]:
    """Independent generators for sim batches, real batches and feature sampling."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


# -- intensity rendering ---------------------------------------------------
def _require_intensity(images: Sequence[RangeImage]) -> None:
    if not images:
        raise ValueError("empty dataset")
    if not any(np.any(im.intensity[im.mask == 1] != 0) for im in images):
        raise ValueError("dataset has no intensity on any existing pixel; cannot supervise the renderer")


def renderer_mse(renderer: Renderer, images: Sequence[RangeImage]) -> float:
    """Mean squared intensity error over existing pixels."""
    pred = renderer.predict_intensity(images)
    num, den = 0.0, 0
    for p, im in zip(pred, images):
        m = im.mask == 1
        num += float(((p[m] - im.intensity[m]) ** 2).sum())
        den += int(m.sum())
    return num / max(den, 1)


def renderer_loss(renderer: Renderer, batch: Sequence[RangeImage], loss: LossConfig) -> Tensor:
    out = renderer.raw(batch, "train")
    target = np.stack([im.intensity for im in batch])
    mask = np.stack([im.mask for im in batch])
    if renderer.head == "l2":
        return l2_intensity_loss(out, target, mask)
    logits, dev = renderer.split(out)
    cfg = LossConfig(n_bins=renderer.n_bins, regression_bin=loss.regression_bin)
    return hybrid_intensity_loss(logits, dev, target, mask, cfg)


def pretrain_renderer(real: Sequence[RangeImage], renderer: Renderer, config: TrainConfig,
                      heldout: Sequence[RangeImage] | None = None,
                      log: Callable[[dict], None] | None = None) -> tuple[Renderer, float]:
    """Self-supervised renderer training: geometry in, intensity as label.

    Returns the renderer (trained in place) and its held-out MSE. Without an
    explicit ``heldout`` set the last tenth of ``real`` is held out.
    """
    _require_intensity(real)
    if heldout is None:
        cut = max(1, len(real) // 10)
        real, heldout = real[:-cut], real[-cut:]
        if not real:
            raise ValueError("need at least two images to hold one out")
    sim_rng, _, _ = _streams(config.seed)
    sampler = BatchSampler(len(real), config.batch_size, sim_rng)
    opt = SGD(renderer.net.parameters(), config.lr, config.momentum, config.grad_clip, config.weight_decay)
    for step in range(config.steps):
        batch = [real[i] for i in sampler.next()]
        opt.zero_grad()
        loss = renderer_loss(renderer, batch, config.loss)
        loss.backward()
        gnorm = opt.step()
        if log:
            log({"step": step, "loss": float(loss.data), "grad_norm": gnorm})
    return renderer, renderer_mse(renderer, heldout)


def render_intensity(images: Sequence[RangeImage], renderer: Renderer, batch_size: int = 16) -> list[RangeImage]:
    """Copies of ``images`` whose intensity channel is the renderer's
    prediction on existing pixels and zero elsewhere."""
    if not images:
        return []
    pred = renderer.predict_intensity(list(images), batch_size)
    out = []
    for p, im in zip(pred, images):
        new = im.copy()
        new.intensity = np.where(im.mask == 1, p, 0.0)
        out.append(new)
    return out


# -- joint training ----------------------------------------------------------
@dataclass
class StepRecord:
    step: int
    focal: float
    geodesic: float | None
    total: float
    grad_norm: float

    def to_dict(self) -> dict:
        return {"step": self.step, "focal": self.focal, "geodesic": self.geodesic,
                "total": self.total, "grad_norm": self.grad_norm}


def train_with_gca(sim: Sequence[RangeImage], real: Sequence[RangeImage], model: Segmenter,
                   config: TrainConfig, log: Callable[[dict], None] | None = None,
                   timing: Callable[[int, float], None] | None = None) -> tuple[Segmenter, list[StepRecord]]:
    """Each step: one labeled synthetic batch, one real batch, focal plus
    ``lam`` times geodesic loss, one SGD update. Trains ``model`` in place."""
    if not sim:
        raise ValueError("empty synthetic dataset")
    lam = config.loss.lam
    if lam > 0 and not real:
        raise ValueError("empty real dataset with a non-zero alignment weight")
    sim_rng, real_rng, feat_rng = _streams(config.seed)
    sim_sampler = BatchSampler(len(sim), config.batch_size, sim_rng)
    real_sampler = BatchSampler(len(real), config.batch_size, real_rng) if lam > 0 else None
    opt = SGD(model.net.parameters(), config.lr, config.momentum, config.grad_clip, config.weight_decay)
    history: list[StepRecord] = []
    for step in range(config.steps):
        t0 = time.perf_counter()
        sb = [sim[i] for i in sim_sampler.next()]
        rb = [real[i] for i in real_sampler.next()] if real_sampler else []
        opt.zero_grad()
        parts = adaptation_loss(model, sb, rb, config.loss, feat_rng, config.feature_layer)
        parts.total.backward()
        gnorm = opt.step()
        rec = StepRecord(step, float(parts.focal.data),
                         None if parts.geodesic is None else float(parts.geodesic.data),
                         float(parts.total.data), gnorm)
        history.append(rec)
        if log:
            log(rec.to_dict())
        if timing:
            timing(step, time.perf_counter() - t0)
    return model, history


def evaluate(model: Segmenter, images: Sequence[RangeImage], batch_size: int = 16) -> IoUAccumulator:
    acc = IoUAccumulator()
    preds = model.predict(list(images), batch_size)
    for p, im in zip(preds, images):
        acc.add(p, im)
    return acc


# -- progressive domain calibration -----------------------------------------
class _Stop(Exception):
    pass


class _Moments:
    """Per-channel streaming mean/variance, merged batch-wise (Chan et al.)."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def add(self, x: np.ndarray) -> None:
        axes = (0,) + tuple(range(2, x.ndim))
        nb = x.size // x.shape[1]
        mb = x.mean(axis=axes)
        m2b = ((x - mb.reshape((1, -1) + (1,) * (x.ndim - 2))) ** 2).sum(axis=axes)
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.n * nb / n)
        self.n = n

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.n


@dataclass
class LayerCalibration:
    name: str
    pre_mean: np.ndarray
    pre_std: np.ndarray
    post_mean: np.ndarray
    post_std: np.ndarray
    zero_std_channels: list[int]

    def row(self) -> dict:
        return {"layer": self.name,
                "pre_mean_absmax": float(np.abs(self.pre_mean).max()),
                "pre_std_mean": float(self.pre_std.mean()),
                "post_mean_absmax": float(np.abs(self.post_mean).max()),
                "post_std_mean": float(self.post_std.mean()),
                "zero_std_channels": len(self.zero_std_channels)}


@dataclass
class CalibrationReport:
    order: list[str]
    layers: list[LayerCalibration]
    samples: int

    def rows(self) -> list[dict]:
        return [layer.row() for layer in self.layers]

    def text(self) -> str:
        lines = [f"progressive domain calibration over {self.samples} samples, {len(self.order)} BN layers"]
        for r in self.rows():
            lines.append(f"{r['layer']:<28} mean {r['pre_mean_absmax']:9.4f} -> {r['post_mean_absmax']:9.2e}"
                         f"  std {r['pre_std_mean']:8.4f} -> {r['post_std_mean']:8.4f}"
                         + (f"  zero-std channels: {r['zero_std_channels']}" if r["zero_std_channels"] else ""))
        return "\n".join(lines)


def _normalized_moments(m: _Moments, mean: np.ndarray, var: np.ndarray, eps: float):
    denom = np.sqrt(var + eps)
    return (m.mean - mean) / denom, np.sqrt(m.var) / denom


def progressive_domain_calibration(model: Network | Segmenter, data, batch_size: int = 16
                                   ) -> tuple[Network | Segmenter, CalibrationReport]:
    """Replace each BN layer's running statistics, in forward order, with the
    statistics of its input over the whole calibration set.

    Every layer's statistics are measured with all earlier layers already
    recalibrated. ``data`` is a sequence of range images for a
    :class:`Segmenter` or an (N, C, H, W) array for a bare :class:`Network`.
    Only running statistics change; gamma, beta and convolution weights do not.
    """
    if isinstance(model, Segmenter):
        net = model.net
        images = list(data)
        batches = [lambda i=i: model.inputs(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        samples = len(images)
    else:
        net = model
        arr = np.asarray(data, dtype=np.float64)
        batches = [lambda i=i: Tensor(arr[i:i + batch_size]) for i in range(0, len(arr), batch_size)]
        samples = len(arr)
    if samples == 0:
        raise ValueError("calibration set is empty")
    bns: list[tuple[str, BatchNorm]] = net.batchnorms()
    if not bns:
        raise ValueError("model has no batch-norm layers to calibrate")
    layers = []
    with no_grad():
        for name, bn in bns:
            moments = _Moments(bn.state.channels)

            def tap(layer, x, moments=moments):
                moments.add(x.data)
                raise _Stop

            bn.tap = tap
            try:
                for make in batches:
                    try:
                        net.forward(make(), "eval")
                    except _Stop:
                        pass
            finally:
                bn.tap = None
            st = bn.state
            pre_mean, pre_std = _normalized_moments(moments, st.running_mean, st.running_var, st.epsilon)
            var = moments.var
            zero = [int(c) for c in np.flatnonzero(var <= 0.0)]
            st.running_mean = moments.mean.copy()
            st.running_var = np.maximum(var, 0.0)
            post_mean, post_std = _normalized_moments(moments, st.running_mean, st.running_var, st.epsilon)
            layers.append(LayerCalibration(name, pre_mean, pre_std, post_mean, post_std, zero))
    return model, CalibrationReport([n for n, _ in bns], layers, samples)
