"""Shared independent oracles for the test suite.

These deliberately avoid the library's vectorized kernels: convolution and
linear products are re-done with explicit loops, derivatives with central
finite differences, and localization with brute-force occlusion sweeps.
"""

import numpy as np
import pytest


def naive_conv2d(x, w, b, stride=1, padding=1):
    """Reference 6-loop cross-correlation, float64 accumulation, float32 out."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, k, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ki in range(k):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, oi * stride + di, oj * stride + dj] * float(w[ki, ci, di, dj])
                    out[ni, ki, oi, oj] = acc + (float(b[ki]) if b is not None else 0.0)
    return out.astype(np.float32)


def naive_linear(x, w, b):
    n, d = x.shape
    m = w.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for ni in range(n):
        for mi in range(m):
            acc = 0.0
            for di in range(d):
                acc += float(x[ni, di]) * float(w[mi, di])
            out[ni, mi] = acc + (float(b[mi]) if b is not None else 0.0)
    return out.astype(np.float32)


def central_diff(f, x, h=1e-3):
    """Central finite differences of a scalar function over every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return grad


def occlusion_map(score_fn, image, patch=3):
    """Brute-force sensitivity: score drop when a patch around each pixel is
    zeroed.  score_fn maps a (C,H,W) image to a scalar."""
    base = score_fn(image)
    _, h, w = image.shape
    out = np.zeros((h, w), dtype=np.float64)
    r = patch // 2
    for i in range(h):
        for j in range(w):
            occluded = image.copy()
            occluded[:, max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1] = 0.0
            out[i, j] = base - score_fn(occluded)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
