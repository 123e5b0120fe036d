"""Convolution, pooling and batch normalization kernels (NCHW, float64)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> tuple[np.ndarray, int, int]:
    """(N*Ho*Wo, kh*kw*C) patch matrix; rows in (n, i, j) order, columns kernel-major."""
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        v = xp[:, :, ::sh, ::sw]
        ho, wo = v.shape[2], v.shape[3]
        return v.transpose(0, 2, 3, 1).reshape(n * ho * wo, c), ho, wo
    win = _windows(xp, kh, kw, sh, sw)
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c), ho, wo


def _kmajor(w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(k, -1)


def _correlate(xp: np.ndarray, w: np.ndarray, sh: int = 1, sw: int = 1) -> np.ndarray:
    n = xp.shape[0]
    k, _, kh, kw = w.shape
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    return np.ascontiguousarray((cols @ _kmajor(w).T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int],
                     stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Gradient of a strided, padded correlation with respect to its input:
    correlate the stride-dilated output gradient with the flipped kernel."""
    n, k, ho, wo = g.shape
    _, c, kh, kw = w.shape
    (h, wd), (sh, sw), (ph, pw) = in_hw, stride, padding
    if sh == 1 and sw == 1:
        gd = g
    else:
        gd = np.zeros((n, k, (ho - 1) * sh + 1, (wo - 1) * sw + 1))
        gd[:, :, ::sh, ::sw] = g
    rh = (h + 2 * ph - kh) - (ho - 1) * sh
    rw = (wd + 2 * pw - kw) - (wo - 1) * sw
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph + rh), (kw - 1 - pw, kw - 1 - pw + rw)))
    return _correlate(gp, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation ``out[n,k] = sum_c x[n,c] * w[k,c] + b[k]``.

    ``stride`` and ``padding`` are ints or (row, col) pairs; padding may not
    exceed ``kernel - 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("conv2d stride must be >= 1")
    if ph > kh - 1 or pw > kw - 1 or ph < 0 or pw < 0:
        raise ValueError("conv2d padding must lie in [0, kernel - 1]")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"conv2d kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    out2 = cols @ _kmajor(weight.data).T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k,):
            raise ValueError(f"conv2d bias shape {bias.shape} != ({k},)")
        out2 += bias.data
        parents = (x, weight, bias)
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            x._accumulate(_conv_input_grad(g, weight.data, (h, w), (sh, sw), (ph, pw)))

    return make_node(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw).

    Output size per axis is ``(in - 1) * stride + k - 2 * padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    wc, k, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c} channels, weight expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hf, wf = (h - 1) * sh + kh, (w - 1) * sw + kw
    if hf - 2 * ph < 1 or wf - 2 * pw < 1:
        raise ValueError("conv_transpose2d padding removes the whole output")
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # N,H,W,K,kh,kw
    full = np.zeros((n, k, hf, wf))
    for a in range(kh):
        for b in range(kw):
            full[:, :, a:a + sh * h:sh, b:b + sw * w:sw] += cols[..., a, b].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, ph:hf - ph, pw:wf - pw])
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def bw(g):
        gfull = np.zeros((n, k, hf, wf))
        gfull[:, :, ph:hf - ph, pw:wf - pw] = g
        gcols = np.empty((n, h, w, k, kh, kw))
        for a in range(kh):
            for b in range(kw):
                gcols[..., a, b] = gfull[:, :, a:a + sh * h:sh, b:b + sw * w:sw].transpose(0, 2, 3, 1)
        if x.requires_grad:
            x._accumulate(np.tensordot(gcols, weight.data, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            weight._accumulate(np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 1, 2])))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_node(out, parents, bw)


def maxpool2d(x: Tensor, kernel=3, stride=1, padding=0) -> Tensor:
    """Max pooling with -inf padding; ties route gradient to the first cell in row-major order."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ValueError("maxpool2d kernel and stride must be >= 1")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"maxpool2d kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    if ph >= kh or pw >= kw:
        raise ValueError("maxpool2d padding must be smaller than the kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - kh) // sh + 1, (wp - kw) // sw + 1
    # separable scan: row-wise max first, then across rows; strict '>' keeps
    # the first maximum, which composes to the row-major first occurrence
    rmax = xp[:, :, :, 0:sw * (wo - 1) + 1:sw].copy()
    rarg = np.zeros(rmax.shape, dtype=np.int32)
    better = np.empty(rmax.shape, dtype=bool)
    for b in range(1, kw):
        cand = xp[:, :, :, b:b + sw * (wo - 1) + 1:sw]
        np.greater(cand, rmax, out=better)
        np.copyto(rarg, b, where=better)
        np.maximum(rmax, cand, out=rmax)
    out = rmax[:, :, 0:sh * (ho - 1) + 1:sh].copy()
    brow = np.zeros(out.shape, dtype=np.int32)
    bcol = rarg[:, :, 0:sh * (ho - 1) + 1:sh].copy()
    better = np.empty(out.shape, dtype=bool)
    for a in range(1, kh):
        cand = rmax[:, :, a:a + sh * (ho - 1) + 1:sh]
        np.greater(cand, out, out=better)
        np.copyto(brow, a, where=better)
        np.copyto(bcol, rarg[:, :, a:a + sh * (ho - 1) + 1:sh], where=better)
        np.maximum(out, cand, out=out)
    rows = brow + (np.arange(ho) * sh)[:, None]
    cols = bcol + (np.arange(wo) * sw)[None, :]
    plane = (np.arange(n * c, dtype=np.int64) * (hp * wp)).reshape(n, c, 1, 1)
    flat_idx = (plane + rows * wp + cols).ravel()

    def bw(g):
        dxp = np.bincount(flat_idx, weights=g.ravel(), minlength=n * c * hp * wp).reshape(xp.shape)
        x._accumulate(dxp[:, :, ph:ph + h, pw:pw + w])

    return make_node(out, (x,), bw)


@dataclass
class BatchNormState:
    """Learnable affine parameters plus running statistics of one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    frozen: bool = field(default=False, compare=False)

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * batch_var


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode uses the biased batch variance for both normalization and the
    running-statistics update; the update is skipped when ``state.frozen``.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm expects (N, {state.channels}, H, W), got {x.shape}")
    gamma, beta, eps = state.gamma, state.beta, state.epsilon
    g4 = gamma.data[None, :, None, None]
    if mode == "train":
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        if not state.frozen:
            state.update(mu, var)

        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxh = g * g4
                s1 = dxh.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x._accumulate(inv[None, :, None, None] / m * (m * dxh - s1 - xhat * s2))
    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(g * g4 * inv[None, :, None, None])
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = xhat * g4 + beta.data[None, :, None, None]
    return make_node(out, (x, gamma, beta), bw)
