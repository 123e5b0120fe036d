"""Range-image segmentation network with context aggregation, and the intensity renderer.

Networks are described by a :class:`ModelSpec`, an ordered list of layer
records. Each layer consumes the previous layer's output; a layer may name a
``skip`` source whose output is added to its own.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import container
from .functional import BatchNormState, batchnorm, conv2d, conv_transpose2d, maxpool2d
from .range_image import NUM_CLASSES, InputStats, RangeImage, ShapeError, normalize_batch
from .tensor import Tensor, concat, no_grad, relu, sigmoid, softmax

SEGMENT_CHANNELS = ("x", "y", "z", "intensity", "depth", "mask")
RENDER_CHANNELS = ("x", "y", "z", "depth", "mask")


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Layer:
    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return []

    def named_batchnorms(self, prefix: str) -> list[tuple[str, "BatchNorm"]]:
        return []

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        self.state = BatchNormState.create(channels, momentum, epsilon)
        # called with the pre-normalization input; used by domain calibration
        self.tap: Callable[["BatchNorm", Tensor], None] | None = None

    def named_parameters(self, prefix):
        return [(f"{prefix}.gamma", self.state.gamma), (f"{prefix}.beta", self.state.beta)]

    def named_batchnorms(self, prefix):
        return [(prefix, self)]

    def __call__(self, x, mode):
        if self.tap is not None:
            self.tap(self, x)
        return batchnorm(x, self.state, mode)


class ConvBlock(Layer):
    """Convolution, optional batch norm, optional ReLU."""

    def __init__(self, rng, cin, cout, kernel=(3, 3), stride=(1, 1), padding=(1, 1),
                 bn=True, act=True, zero_init=False):
        kh, kw = kernel
        fan_in = cin * kh * kw
        self.weight = (Tensor(np.zeros((cout, cin, kh, kw)), requires_grad=True) if zero_init
                       else kaiming(rng, (cout, cin, kh, kw), fan_in))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding = tuple(stride), tuple(padding)
        self.bn = BatchNorm(cout) if bn else None
        self.act = act

    def named_parameters(self, prefix):
        ps = [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]
        if self.bn is not None:
            ps += self.bn.named_parameters(f"{prefix}.bn")
        return ps

    def named_batchnorms(self, prefix):
        return self.bn.named_batchnorms(f"{prefix}.bn") if self.bn is not None else []

    def __call__(self, x, mode):
        y = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn(y, mode)
        return relu(y) if self.act else y


class DeconvBlock(ConvBlock):
    """Transposed convolution (1x4 kernel, 1x2 stride) doubling the width."""

    def __init__(self, rng, channels, bn=True):
        self.weight = kaiming(rng, (channels, channels, 1, 4), channels * 2)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.bn = BatchNorm(channels) if bn else None
        self.act = True

    def __call__(self, x, mode):
        y = conv_transpose2d(x, self.weight, self.bias, stride=(1, 2), padding=(0, 1))
        if self.bn is not None:
            y = self.bn(y, mode)
        return relu(y)


class Fire(Layer):
    """1x1 squeeze, then parallel 1x1 and 3x3 expands concatenated on channels."""

    def __init__(self, rng, cin, squeeze, e1, e3, bn=True, upsample=False):
        self.squeeze = ConvBlock(rng, cin, squeeze, (1, 1), (1, 1), (0, 0), bn=bn)
        self.up = DeconvBlock(rng, squeeze, bn=bn) if upsample else None
        self.expand1 = ConvBlock(rng, squeeze, e1, (1, 1), (1, 1), (0, 0), bn=bn)
        self.expand3 = ConvBlock(rng, squeeze, e3, (3, 3), (1, 1), (1, 1), bn=bn)

    def _parts(self):
        parts = [("squeeze", self.squeeze)]
        if self.up is not None:
            parts.append(("up", self.up))
        return parts + [("expand1", self.expand1), ("expand3", self.expand3)]

    def named_parameters(self, prefix):
        return [p for name, blk in self._parts() for p in blk.named_parameters(f"{prefix}.{name}")]

    def named_batchnorms(self, prefix):
        return [b for name, blk in self._parts() for b in blk.named_batchnorms(f"{prefix}.{name}")]

    def __call__(self, x, mode):
        s = self.squeeze(x, mode)
        if self.up is not None:
            s = self.up(s, mode)
        return concat([self.expand1(s, mode), self.expand3(s, mode)], axis=1)


@dataclass
class CamParams:
    """Context aggregation gate: max pool, 1x1 reduce, ReLU, 1x1 expand, sigmoid."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    pool_kernel: int = 7
    reduction: int = 4

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int = 4,
             pool_kernel: int = 7) -> "CamParams":
        if channels % reduction:
            raise ValueError(f"CAM channels {channels} not divisible by reduction {reduction}")
        if pool_kernel % 2 == 0:
            raise ValueError("CAM pool kernel must be odd")
        mid = channels // reduction
        return cls(kaiming(rng, (mid, channels, 1, 1), channels), Tensor(np.zeros(mid), requires_grad=True),
                   kaiming(rng, (channels, mid, 1, 1), mid), Tensor(np.zeros(channels), requires_grad=True),
                   pool_kernel, reduction)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


def cam_gate(x: Tensor, params: CamParams) -> Tensor:
    k = params.pool_kernel
    pooled = maxpool2d(x, k, 1, k // 2)
    hidden = relu(conv2d(pooled, params.w1, params.b1))
    return sigmoid(conv2d(hidden, params.w2, params.b2))


def cam_forward(x: Tensor, params: CamParams) -> Tensor:
    if x.shape[1] != params.channels:
        raise ValueError(f"CAM built for {params.channels} channels, input has {x.shape[1]}")
    if x.shape[1] % params.reduction:
        raise ValueError("CAM input channels not divisible by the reduction ratio")
    return x * cam_gate(x, params)


class CAM(Layer):
    def __init__(self, rng, channels, reduction=4, pool_kernel=7):
        self.params = CamParams.init(rng, channels, reduction, pool_kernel)

    def named_parameters(self, prefix):
        p = self.params
        return [(f"{prefix}.w1", p.w1), (f"{prefix}.b1", p.b1), (f"{prefix}.w2", p.w2), (f"{prefix}.b2", p.b2)]

    def __call__(self, x, mode):
        return cam_forward(x, self.params)


class MaxPool(Layer):
    def __init__(self, kernel=3, stride=(1, 2), padding=1):
        self.kernel, self.stride, self.padding = kernel, tuple(stride), padding

    def __call__(self, x, mode):
        return maxpool2d(x, self.kernel, self.stride, self.padding)


# -- spec ----------------------------------------------------------------
@dataclass
class ModelSpec:
    """Ordered layer records plus I/O dimensions.

    Layer record types: ``conv`` (cin, cout, kernel, stride, padding, bn, act),
    ``fire`` / ``fire_deconv`` (cin, squeeze, e1, e3), ``cam`` (channels,
    reduction, pool_kernel), ``maxpool`` (kernel, stride, padding) and
    ``classifier`` (cin, cout). Every record has a unique ``name`` and an
    optional ``skip`` naming an earlier layer whose output is added.
    """

    layers: list[dict]
    in_channels: int = 6
    out_channels: int = NUM_CLASSES
    height: int = 64
    width: int = 512
    feature_layer: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def has_cam(self) -> bool:
        return any(layer["type"] == "cam" for layer in self.layers)

    def without_cam(self) -> "ModelSpec":
        kept, renamed = [], {}
        prev = None
        for layer in self.layers:
            if layer["type"] == "cam":
                renamed[layer["name"]] = prev
                continue
            layer = dict(layer)
            if layer.get("skip") in renamed:
                layer["skip"] = renamed[layer["skip"]]
            kept.append(layer)
            prev = layer["name"]
        return ModelSpec(kept, self.in_channels, self.out_channels, self.height, self.width,
                         renamed.get(self.feature_layer, self.feature_layer))


def segmenter_spec(height: int = 64, width: int = 512, base: int = 16, cam: bool = True,
                   in_channels: int = 6, out_channels: int = NUM_CLASSES,
                   cam_reduction: int = 4, cam_pool: int = 7) -> ModelSpec:
    """Desk-scale topology: stem conv (width stride 2) + CAM, pool, fire + CAM,
    fire + CAM, fire, two fire-deconv stages back to full width, 3x3 classifier."""
    if width % 4:
        raise ValueError("width must be divisible by 4")
    b = base
    q = max(b // 4, 1)
    h = b // 2
    layers: list[dict] = [
        dict(name="conv1", type="conv", cin=in_channels, cout=b, kernel=[3, 3], stride=[1, 2], padding=[1, 1]),
    ]
    if cam:
        layers.append(dict(name="cam1", type="cam", channels=b, reduction=cam_reduction, pool_kernel=cam_pool))
    stem = layers[-1]["name"]
    layers.append(dict(name="pool1", type="maxpool", kernel=3, stride=[1, 2], padding=1))
    layers.append(dict(name="fire2", type="fire", cin=b, squeeze=q, e1=h, e3=h))
    if cam:
        layers.append(dict(name="cam2", type="cam", channels=b, reduction=cam_reduction, pool_kernel=cam_pool))
    layers.append(dict(name="fire3", type="fire", cin=b, squeeze=q, e1=b, e3=b))
    if cam:
        layers.append(dict(name="cam3", type="cam", channels=2 * b, reduction=cam_reduction, pool_kernel=cam_pool))
    layers += [
        dict(name="fire4", type="fire", cin=2 * b, squeeze=h, e1=b, e3=b),
        dict(name="fdeconv5", type="fire_deconv", cin=2 * b, squeeze=h, e1=h, e3=h, skip=stem),
        dict(name="fdeconv6", type="fire_deconv", cin=b, squeeze=q, e1=h, e3=h),
        dict(name="classifier", type="classifier", cin=b, cout=out_channels),
    ]
    return ModelSpec(layers, in_channels, out_channels, height, width, feature_layer="fdeconv6")


def renderer_spec(height: int = 64, width: int = 512, base: int = 16, n_bins: int = 10,
                  head: str = "hybrid") -> ModelSpec:
    """Same trunk as the segmenter without CAM; the head emits ``n_bins``
    logits plus ``n_bins`` deviations (hybrid) or one intensity (l2)."""
    out = 2 * n_bins if head == "hybrid" else 1
    return segmenter_spec(height, width, base, cam=False, in_channels=len(RENDER_CHANNELS), out_channels=out)


def _build_layer(rec: dict, rng: np.random.Generator, zero_head: bool) -> Layer:
    t = rec["type"]
    if t == "conv":
        return ConvBlock(rng, rec["cin"], rec["cout"], tuple(rec.get("kernel", (3, 3))),
                         tuple(rec.get("stride", (1, 1))), tuple(rec.get("padding", (1, 1))),
                         bn=rec.get("bn", True), act=rec.get("act", True))
    if t == "fire":
        return Fire(rng, rec["cin"], rec["squeeze"], rec["e1"], rec["e3"], bn=rec.get("bn", True))
    if t == "fire_deconv":
        return Fire(rng, rec["cin"], rec["squeeze"], rec["e1"], rec["e3"], bn=rec.get("bn", True), upsample=True)
    if t == "cam":
        return CAM(rng, rec["channels"], rec.get("reduction", 4), rec.get("pool_kernel", 7))
    if t == "maxpool":
        return MaxPool(rec.get("kernel", 3), tuple(rec.get("stride", (1, 2))), rec.get("padding", 1))
    if t == "classifier":
        return ConvBlock(rng, rec["cin"], rec["cout"], (3, 3), (1, 1), (1, 1), bn=False, act=False,
                         zero_init=zero_head)
    raise ValueError(f"unknown layer type {t!r}")


class Network:
    """A built :class:`ModelSpec` holding parameters and BN running statistics."""

    def __init__(self, spec: ModelSpec, seed: int = 0, zero_head: bool = False):
        names = [rec["name"] for rec in spec.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for i, rec in enumerate(spec.layers):
            if rec.get("skip") is not None and rec["skip"] not in names[:i]:
                raise ValueError(f"layer {rec['name']!r} skips from unknown or later layer {rec['skip']!r}")
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[str, Layer, str | None]] = [
            (rec["name"], _build_layer(rec, rng, zero_head), rec.get("skip")) for rec in spec.layers
        ]

    def forward(self, x: Tensor, mode: str = "train", keep: Sequence[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
        """Return the final output and the outputs of layers named in ``keep``."""
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"network expects (N, {self.spec.in_channels}, H, W), got {x.shape}")
        needed = set(keep) | {s for _, _, s in self.layers if s}
        saved: dict[str, Tensor] = {}
        h = x
        for name, layer, skip in self.layers:
            h = layer(h, mode)
            if skip is not None:
                h = h + saved[skip]
            if name in needed:
                saved[name] = h
        return h, {k: saved[k] for k in keep}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [p for name, layer, _ in self.layers for p in layer.named_parameters(name)]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batchnorms(self) -> list[tuple[str, BatchNorm]]:
        """BN layers in forward execution order."""
        return [b for name, layer, _ in self.layers for b in layer.named_batchnorms(name)]

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {name: t.data.copy() for name, t in self.named_parameters()}
        for name, bn in self.batchnorms():
            d[f"{name}.running_mean"] = bn.state.running_mean.copy()
            d[f"{name}.running_var"] = bn.state.running_var.copy()
        return d

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {f"{n}.{s}" for n, _ in self.batchnorms() for s in ("running_mean", "running_var")}
        if set(d) != expected:
            missing, extra = sorted(expected - set(d)), sorted(set(d) - expected)
            raise ValueError(f"state dict mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in params.items():
            if d[name].shape != t.shape:
                raise ShapeError(f"shape mismatch for {name}: {d[name].shape} vs {t.shape}")
            t.data = np.array(d[name], dtype=np.float64)
        for name, bn in self.batchnorms():
            bn.state.running_mean = np.array(d[f"{name}.running_mean"], dtype=np.float64)
            bn.state.running_var = np.array(d[f"{name}.running_var"], dtype=np.float64)

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.spec = self.spec
        other.layers = [(n, _build_layer(rec, np.random.default_rng(0), False), s)
                        for (n, _, s), rec in zip(self.layers, self.spec.layers)]
        other.load_state_dict(self.state_dict())
        return other


def _check_dims(images: Sequence[RangeImage], spec: ModelSpec) -> None:
    for img in images:
        if img.shape != (spec.height, spec.width):
            raise ShapeError(f"image is {img.shape[0]}x{img.shape[1]}, model expects {spec.height}x{spec.width}")


@dataclass
class Segmenter:
    """Segmentation network plus the input standardization it was trained with."""

    net: Network
    stats: InputStats = field(default_factory=InputStats.identity)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int = 0, stats: InputStats | None = None,
               zero_head: bool = False) -> "Segmenter":
        return cls(Network(spec, seed, zero_head), stats or InputStats.identity())

    @property
    def spec(self) -> ModelSpec:
        return self.net.spec

    def inputs(self, images: Sequence[RangeImage]) -> Tensor:
        _check_dims(images, self.spec)
        return Tensor(normalize_batch(images, self.stats, SEGMENT_CHANNELS))

    def logits(self, images: Sequence[RangeImage], mode: str = "train",
               keep: Sequence[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
        return self.net.forward(self.inputs(images), mode, keep)

    def predict(self, images: Sequence[RangeImage], batch_size: int = 16) -> np.ndarray:
        preds = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out, _ = self.logits(images[i:i + batch_size], "eval")
                preds.append(out.data.argmax(axis=1).astype(np.uint8))
        return np.concatenate(preds) if preds else np.zeros((0, self.spec.height, self.spec.width), np.uint8)

    def save(self, path, meta: dict | None = None) -> None:
        save_network(path, self.net, self.stats, "segmenter", meta)

    @classmethod
    def load(cls, path) -> "Segmenter":
        net, stats, extra = load_network(path, "segmenter")
        return cls(net, stats)

    def copy(self) -> "Segmenter":
        return Segmenter(self.net.copy(), InputStats(self.stats.mean.copy(), self.stats.std.copy()))


def segment_forward(img: RangeImage, model: Segmenter, mode: str = "eval") -> Tensor:
    """Per-pixel class probabilities, shape (classes, H, W)."""
    logits, _ = model.logits([img], mode)
    return softmax(logits, axis=1)[0]


def bin_edges(n_bins: int) -> np.ndarray:
    if n_bins < 2:
        raise ValueError("need at least two intensity bins")
    return np.linspace(0.0, 1.0, n_bins + 1)


def bin_references(edges: np.ndarray) -> np.ndarray:
    return 0.5 * (edges[:-1] + edges[1:])


@dataclass
class Renderer:
    """Intensity renderer; ``head`` is ``"hybrid"`` (bins + deviations) or ``"l2"``."""

    net: Network
    n_bins: int = 10
    head: str = "hybrid"
    stats: InputStats = field(default_factory=InputStats.identity)

    @classmethod
    def create(cls, height: int, width: int, base: int = 16, n_bins: int = 10, head: str = "hybrid",
               seed: int = 0, stats: InputStats | None = None) -> "Renderer":
        if head not in ("hybrid", "l2"):
            raise ValueError(f"unknown renderer head {head!r}")
        spec = renderer_spec(height, width, base, n_bins, head)
        return cls(Network(spec, seed), n_bins, head, stats or InputStats.identity())

    @property
    def spec(self) -> ModelSpec:
        return self.net.spec

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.n_bins)

    @property
    def references(self) -> np.ndarray:
        return bin_references(self.edges)

    def inputs(self, images: Sequence[RangeImage]) -> Tensor:
        _check_dims(images, self.spec)
        return Tensor(normalize_batch(images, self.stats, RENDER_CHANNELS))

    def raw(self, images: Sequence[RangeImage], mode: str = "train") -> Tensor:
        out, _ = self.net.forward(self.inputs(images), mode)
        return out

    def split(self, out: Tensor) -> tuple[Tensor, Tensor]:
        n = self.n_bins
        return out[:, :n], out[:, n:]

    def predict_intensity(self, images: Sequence[RangeImage], batch_size: int = 16) -> np.ndarray:
        """Predicted intensity per pixel, clamped to [0, 1]."""
        preds = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = self.raw(images[i:i + batch_size], "eval").data
                if self.head == "l2":
                    preds.append(np.clip(out[:, 0], 0.0, 1.0))
                else:
                    preds.append(decode_intensity(out[:, :self.n_bins], out[:, self.n_bins:], self.references))
        return np.concatenate(preds)

    def save(self, path, meta: dict | None = None) -> None:
        save_network(path, self.net, self.stats, "renderer",
                     {**(meta or {}), "n_bins": self.n_bins, "head": self.head})

    @classmethod
    def load(cls, path) -> "Renderer":
        net, stats, extra = load_network(path, "renderer")
        return cls(net, extra["n_bins"], extra["head"], stats)


def decode_intensity(bin_logits: np.ndarray, deviations: np.ndarray, references: np.ndarray) -> np.ndarray:
    """reference[argmax] + deviation[argmax], clamped to [0, 1]; class axis is -3."""
    k = bin_logits.argmax(axis=-3)
    dev = np.take_along_axis(deviations, np.expand_dims(k, -3), axis=-3).squeeze(-3)
    return np.clip(references[k] + dev, 0.0, 1.0)


def render_forward(img: RangeImage, renderer: Renderer, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """(bin logits, deviations), each shaped (n_bins, H, W)."""
    if renderer.head != "hybrid":
        raise ValueError("render_forward needs a hybrid-head renderer")
    logits, dev = renderer.split(renderer.raw([img], mode))
    return logits[0], dev[0]


def save_network(path, net: Network, stats: InputStats, kind: str, meta: dict | None = None) -> None:
    tensors = net.state_dict()
    tensors["input.mean"] = stats.mean
    tensors["input.std"] = stats.std
    container.save_checkpoint(path, tensors, {
        "kind": kind, "spec": net.spec.to_dict(), "spec_hash": net.spec.spec_hash(), **(meta or {})})


def load_network(path, kind: str, expect_hash: str | None = None) -> tuple[Network, InputStats, dict]:
    tensors, meta = container.load_checkpoint(path)
    if meta.get("kind") != kind:
        raise ValueError(f"{path} holds a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    spec = ModelSpec.from_dict(meta["spec"])
    if spec.spec_hash() != meta.get("spec_hash"):
        raise ValueError(f"{path}: spec hash does not match the stored topology")
    if expect_hash is not None and expect_hash != meta["spec_hash"]:
        raise ValueError(f"{path}: checkpoint topology {meta['spec_hash']} != expected {expect_hash}")
    stats = InputStats(tensors.pop("input.mean"), tensors.pop("input.std"))
    net = Network(spec)
    net.load_state_dict(tensors)
    return net, stats, meta


# -- dropout-noise probe ---------------------------------------------------
@dataclass
class ProbeRow:
    p: float
    plain_error: float
    plain_se: float
    cam_error: float
    cam_se: float


def noise_robustness_probe(kernel: np.ndarray, p_list: Sequence[float], trials: int = 100, seed: int = 0,
                           input_shape: tuple[int, int, int, int] = (1, 16, 32, 64),
                           cam: CamParams | None = None) -> list[ProbeRow]:
    """Output error of a 3x3 conv under pixel dropout, with and without a CAM
    gate in front. Both configurations see the same dropout masks."""
    if trials < 30:
        raise ValueError("need at least 30 trials")
    kernel = np.asarray(kernel, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape)
    if cam is None:
        cam = CamParams.init(rng, input_shape[1])
    w = Tensor(kernel)
    pad = (kernel.shape[2] // 2, kernel.shape[3] // 2)
    rows = []
    with no_grad():
        xt = Tensor(x)
        clean_plain = conv2d(xt, w, None, 1, pad).data
        clean_cam = conv2d(cam_forward(xt, cam), w, None, 1, pad).data
        for p in p_list:
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1)")
            mask_rng = np.random.default_rng([seed, int(round(p * 1e6))])
            plain, gated = [], []
            for _ in range(trials):
                keep = mask_rng.random((input_shape[0], 1) + tuple(input_shape[2:])) >= p
                xc = Tensor(x * keep)
                plain.append(np.linalg.norm(conv2d(xc, w, None, 1, pad).data - clean_plain))
                gated.append(np.linalg.norm(conv2d(cam_forward(xc, cam), w, None, 1, pad).data - clean_cam))
            plain_a, gated_a = np.array(plain), np.array(gated)
            rows.append(ProbeRow(float(p), float(plain_a.mean()), float(plain_a.std(ddof=1) / np.sqrt(trials)),
                                 float(gated_a.mean()), float(gated_a.std(ddof=1) / np.sqrt(trials))))
    return rows
