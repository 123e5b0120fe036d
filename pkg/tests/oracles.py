"""Independent reference computations used as test oracles.

Nothing here imports the code under test's kernels; everything is written as
plain loops or closed forms.
"""
from __future__ import annotations

import math

import numpy as np


def direct_conv2d(x, w, b, stride=1, padding=0):
    """Six nested loops of direct summation."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ci, r * sh + a, s * sw + bb] * w[o, ci, a, bb]
                    out[i, o, r, s] = acc
    return out


def direct_conv_transpose2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    _, k, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    full = np.zeros((n, k, (h - 1) * sh + kh, (wd - 1) * sw + kw))
    for i in range(n):
        for ci in range(c):
            for r in range(h):
                for s in range(wd):
                    full[i, :, r * sh:r * sh + kh, s * sw:s * sw + kw] += x[i, ci, r, s] * w[ci]
    out = full[:, :, ph:full.shape[2] - ph, pw:full.shape[3] - pw]
    return out + b[None, :, None, None]


def window_max(x, kernel, stride, padding):
    n, c, h, w = x.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    out = np.empty((n, c, out_h, out_w))
    for i in range(n):
        for ch in range(c):
            for r in range(out_h):
                for s in range(out_w):
                    best = -math.inf
                    for a in range(kernel):
                        for b in range(kernel):
                            rr, ss = r * stride + a - padding, s * stride + b - padding
                            if 0 <= rr < h and 0 <= ss < w and x[i, ch, rr, ss] > best:
                                best = x[i, ch, rr, ss]
                    out[i, ch, r, s] = best
    return out


def central_diff(f, arrays, h=1e-5, index_subset=None):
    """Central finite differences of scalar ``f()`` w.r.t. each array in place."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idxs = range(flat.size) if index_subset is None else index_subset[k]
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Relative-error comparison; entries where both are ~0 pass via ``atol``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (err <= rtol * scale) | (err <= atol)
    return bool(ok.all()), float(np.max(np.where(scale > 0, err / np.maximum(scale, 1e-300), 0.0)))


def iou_by_sets(pred, labels, ignore, cls):
    """IoU via explicit Python sets of pixel coordinates."""
    h, w = labels.shape
    p, g = set(), set()
    for r in range(h):
        for s in range(w):
            if ignore[r, s]:
                continue
            if pred[r, s] == cls:
                p.add((r, s))
            if labels[r, s] == cls:
                g.add((r, s))
    union = p | g
    if not union:
        return 1.0
    return len(p & g) / len(union)


def logm_eig(c):
    lam, u = np.linalg.eigh(c)
    return (u * np.log(lam)) @ u.T
