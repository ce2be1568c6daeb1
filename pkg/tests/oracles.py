"""Slow, obviously-correct reference implementations used by the tests."""

import itertools
import math

import numpy as np


def conv3d_naive(x, w, b=None, stride=1, padding=0):
    n, c, h, wd, d = x.shape
    co, _, k, _, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding, d + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd, padding:padding + d] = x
    outs = [(s + 2 * padding - k) // stride + 1 for s in (h, wd, d)]
    out = np.zeros((n, co, *outs))
    for i, o, p, q, r in itertools.product(range(n), range(co), *map(range, outs)):
        acc = 0.0
        for ch, a, bb, cc in itertools.product(range(c), range(k), range(k), range(k)):
            acc += xp[i, ch, p * stride + a, q * stride + bb, r * stride + cc] * w[o, ch, a, bb, cc]
        out[i, o, p, q, r] = acc + (b[o] if b is not None else 0.0)
    return out


def conv_transpose3d_naive(x, w, stride=2, padding=0):
    n, c, h, wd, d = x.shape
    _, co, k, _, _ = w.shape
    full = [(s - 1) * stride + k for s in (h, wd, d)]
    out = np.zeros((n, co, *full))
    for i, ch, p, q, r in itertools.product(range(n), range(c), range(h), range(wd), range(d)):
        for o, a, bb, cc in itertools.product(range(co), range(k), range(k), range(k)):
            out[i, o, p * stride + a, q * stride + bb, r * stride + cc] += x[i, ch, p, q, r] * w[ch, o, a, bb, cc]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding, padding:-padding]
    return out


def nt_xent_loops(z, t, exclude_positive=False):
    """Per-anchor NT-Xent with rows (2i, 2i+1) forming positive pairs."""
    z = np.asarray(z, dtype=float)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    m = len(z)
    total = 0.0
    for i in range(m):
        j = i ^ 1
        num = math.exp(float(z[i] @ z[j]) / t)
        den = 0.0
        for kk in range(m):
            if kk == i or (exclude_positive and kk == j):
                continue
            den += math.exp(float(z[i] @ z[kk]) / t)
        total += -math.log(num / den)
    return total / m


def hd95_brute(a, b):
    """Symmetric 95th-percentile surface distance by exhaustive search."""
    from scipy.ndimage import binary_erosion

    def surf(m):
        return np.argwhere(m & ~binary_erosion(m, border_value=0))

    sa, sb = surf(a), surf(b)
    da = [min(np.linalg.norm(p - q) for q in sb) for p in sa]
    db = [min(np.linalg.norm(p - q) for q in sa) for p in sb]
    return float(np.percentile(np.array(da + db), 95))
