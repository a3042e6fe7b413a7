"""Content-style consistency losses over weighted detail maps.

All functions take aligned ``(M, H, W)`` stacks ``gw`` (reference, constant)
and ``sw`` (candidate) and return ``(loss, grad_sw)``.
"""
from __future__ import annotations

import numpy as np

from .config import CscWeights
from .numerics import ShapeError

STD_FLOOR = 1e-12


def _check(gw, sw):
    gw = np.asarray(gw, dtype=np.float64)
    sw = np.asarray(sw, dtype=np.float64)
    if gw.ndim != 3 or gw.shape != sw.shape:
        raise ShapeError(f"stacks must be aligned (M, H, W) arrays, got {gw.shape} and {sw.shape}")
    return gw, sw


def mse_content(gw, sw):
    gw, sw = _check(gw, sw)
    diff = sw - gw
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def gram(fmap, mode: str = "row") -> np.ndarray:
    """Gram matrix of a single map viewed as an H x W matrix: A A^T / (H W)."""
    a = np.asarray(fmap, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"gram expects a single (H, W) map, got {a.shape}")
    if mode == "flat":
        return np.array([[np.sum(a * a) / a.size]])
    return a @ a.T / a.size


def gram_loss(gw, sw, mode: str = "row"):
    gw, sw = _check(gw, sw)
    m, h, w = sw.shape
    total = 0.0
    grad = np.empty_like(sw)
    for i in range(m):
        d = gram(sw[i], mode) - gram(gw[i], mode)
        total += float(np.sum(d * d))
        if mode == "flat":
            grad[i] = 4.0 * d[0, 0] * sw[i] / (h * w)
        else:
            grad[i] = 4.0 * d @ sw[i] / (h * w)
    return total / m, grad / m


def _pearson(g, s):
    gc = g - g.mean()
    sc = s - s.mean()
    a = np.sum(gc * gc)
    b = np.sum(sc * sc)
    n = g.size
    if np.sqrt(a / n) < STD_FLOOR or np.sqrt(b / n) < STD_FLOOR:
        return 0.0, np.zeros_like(s)
    # sqrt(a * a) == a in IEEE arithmetic, so identical maps give r == 1 exactly
    denom = np.sqrt(a * b)
    r = float(np.clip(np.sum(gc * sc) / denom, -1.0, 1.0))
    dr = gc / denom - r * sc / b
    return r, dr


def corr_loss(gw, sw):
    """1 - mean Pearson correlation of each map pair; constant maps count as correlation 0."""
    gw, sw = _check(gw, sw)
    m = sw.shape[0]
    rs = np.empty(m)
    grad = np.empty_like(sw)
    for i in range(m):
        rs[i], dr = _pearson(gw[i], sw[i])
        grad[i] = -dr / m
    return float(1.0 - rs.mean()), grad


def csc_terms(gw, sw, weights: CscWeights | None = None):
    """Individual terms plus the weighted total: ``({mse, corr, gram, total}, grad_sw)``."""
    weights = weights or CscWeights()
    mse, g_mse = mse_content(gw, sw)
    corr, g_corr = corr_loss(gw, sw)
    gr, g_gram = gram_loss(gw, sw, weights.gram_mode)
    total = weights.beta1 * mse + weights.beta2 * corr + weights.beta3 * gr
    grad = weights.beta1 * g_mse + weights.beta2 * g_corr + weights.beta3 * g_gram
    return {"mse": mse, "corr": corr, "gram": gr, "total": total}, grad


def csc_total(gw, sw, weights: CscWeights | None = None):
    terms, grad = csc_terms(gw, sw, weights)
    return terms["total"], grad
