"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Direct 6-loop cross-correlation on numpy arrays (n, c, h, w)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += w[oi, ci, a, bb] * xp[ni, ci, i * stride + a * dilation, j * stride + bb * dilation]
                    out[ni, oi, i, j] = acc + (0.0 if b is None else b[oi])
    return out


def brute_boundary(mask):
    """Foreground voxels with any 6-neighbour that is background or outside the grid."""
    mask = np.asarray(mask, dtype=bool)
    pts = []
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < shape[axis] or not mask[tuple(nb)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def brute_asd(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """All-pairs nearest-boundary distances, averaged over both boundary sets."""
    bp = brute_boundary(pred) * np.asarray(spacing)
    bg = brute_boundary(gt) * np.asarray(spacing)
    if len(bp) == 0 or len(bg) == 0:
        return None
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(bp) + len(bg)))


def brute_w1(a, b):
    """Exact W1 between equal-size samples by enumerating all assignments."""
    best = math.inf
    for perm in itertools.permutations(range(len(b))):
        best = min(best, sum(abs(a[i] - b[p]) for i, p in enumerate(perm)) / len(a))
    return best
