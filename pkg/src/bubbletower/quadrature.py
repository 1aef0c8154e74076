"""Gauss rules and panel helpers shared by the radial and space-time integrators."""
from functools import lru_cache

import numpy as np
from scipy.special import gamma, roots_jacobi, roots_legendre


def sphere_area(n):
    """Surface measure of the unit sphere S^{n-1} in R^n."""
    return 2.0 * np.pi ** (n / 2) / gamma(n / 2)


@lru_cache(maxsize=None)
def gauss_legendre(m):
    x, w = roots_legendre(m)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_jacobi_left(m, beta):
    """Nodes/weights on [0,1] for the weight u**beta."""
    x, w = roots_jacobi(m, 0.0, beta)
    return 0.5 * (x + 1.0), w / 2.0 ** (beta + 1.0)


def panel_nodes(breaks, m):
    """Composite Gauss-Legendre nodes and weights over consecutive breakpoints."""
    breaks = np.asarray(breaks, dtype=float)
    a, b = breaks[:-1], breaks[1:]
    x, w = gauss_legendre(m)
    nodes = a[:, None] + (b - a)[:, None] * x[None, :]
    weights = (b - a)[:, None] * w[None, :]
    return nodes.ravel(), weights.ravel()


def geometric_breaks(a, b, ratio=2.0):
    """Breakpoints from a to b (0 < a < b) with consecutive ratio at most `ratio`."""
    if b <= a:
        return np.array([a, b])
    m = max(1, int(np.ceil(np.log(b / a) / np.log(ratio))))
    return np.geomspace(a, b, m + 1)


def refine_breaks(breaks, ratio=2.0):
    """Split every panel [a, b] with a > 0 and b/a > ratio geometrically."""
    breaks = np.asarray(breaks, dtype=float)
    a, b = breaks[:-1], breaks[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(a > 0, b / np.where(a > 0, a, 1.0), 1.0)
        cnt = np.where(q > ratio, np.ceil(np.log(q) / np.log(ratio)), 1).astype(int)
    idx = np.repeat(np.arange(a.size), cnt)
    kk = np.arange(idx.size) - np.repeat(np.cumsum(cnt) - cnt, cnt) + 1
    inner = a[idx] * q[idx] ** (kk / cnt[idx])
    pts = np.where(kk == cnt[idx], b[idx], inner)
    return np.concatenate([breaks[:1], pts])


def merge_breaks(points, lo, hi, min_gap=1e-12):
    pts = np.unique(np.clip(np.asarray(points, dtype=float), lo, hi))
    keep = np.concatenate([[True], np.diff(pts) > min_gap * np.maximum(np.abs(pts[1:]), 1e-300)])
    pts = pts[keep]
    pts[-1] = hi
    return pts
