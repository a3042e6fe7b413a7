"""Entropy-based selection and reweighting of detail maps.

Each map is scored by its normalized histogram entropy; low-entropy maps in
both the reference and the candidate stack are considered the most
informative. Scores are plain numbers: no gradient flows through them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PruningConfig
from .numerics import ShapeError


@dataclass(frozen=True)
class ImportanceProfile:
    h_norm_g: np.ndarray
    h_norm_s: np.ndarray
    combined: np.ndarray
    selected: tuple[int, ...]
    weights: np.ndarray  # one per selected index, in selection order
    alpha: float
    gamma: float
    bins: int

    @property
    def m(self) -> int:
        return len(self.selected)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "bins": self.bins,
            "selected": list(self.selected),
            "weights": [float(w) for w in self.weights],
        }


def normalized_entropy(fmap, bins: int = 64) -> float:
    """Shannon entropy of an equal-width histogram over the map's own range, divided by log(bins)."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = np.asarray(fmap, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return 0.0
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins)
    p = counts[counts > 0] / values.size
    h = -np.sum(p * np.log(p)) / np.log(bins)
    return float(min(max(h, 0.0), 1.0))


def _check_stacks(g, s):
    g = np.asarray(g, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if g.ndim != 3 or g.shape != s.shape:
        raise ShapeError(f"feature stacks must be aligned (L, H, W) arrays, got {g.shape} and {s.shape}")
    return g, s


def entropies(stack, bins: int = 64) -> np.ndarray:
    return np.array([normalized_entropy(m, bins) for m in stack])


def combined_importance(g, s, bins: int = 64) -> np.ndarray:
    g, s = _check_stacks(g, s)
    return ((1.0 - entropies(g, bins)) + (1.0 - entropies(s, bins))) / 2.0


def select_top_m(importance, m: int) -> tuple[int, ...]:
    """Indices of the ``m`` largest scores, ascending; ties go to the lower index."""
    importance = np.asarray(importance, dtype=np.float64)
    if not 1 <= m <= importance.size:
        raise ValueError(f"m must lie in [1, {importance.size}], got {m}")
    order = np.argsort(-importance, kind="stable")
    return tuple(sorted(int(i) for i in order[:m]))


def importance_weights(scores, alpha: float, gamma: float) -> np.ndarray:
    return (1.0 + alpha * np.asarray(scores, dtype=np.float64)) ** gamma


def build_profile(g, s, cfg: PruningConfig | None = None) -> ImportanceProfile:
    cfg = cfg or PruningConfig()
    g, s = _check_stacks(g, s)
    hg = entropies(g, cfg.bins)
    hs = entropies(s, cfg.bins)
    combined = ((1.0 - hg) + (1.0 - hs)) / 2.0
    selected = select_top_m(combined, cfg.resolve_m(len(combined)))
    weights = importance_weights(combined[list(selected)], cfg.alpha, cfg.gamma)
    return ImportanceProfile(hg, hs, combined, selected, weights, cfg.alpha, cfg.gamma, cfg.bins)


def apply_weights(g, s, profile: ImportanceProfile):
    """Weighted selections ``(G^w, S^w)``, stacked in selection order."""
    g, s = _check_stacks(g, s)
    idx = list(profile.selected)
    if any(i < 0 or i >= len(g) for i in idx) or len(set(idx)) != len(idx):
        raise ValueError(f"invalid selection {profile.selected} for {len(g)} maps")
    w = np.asarray(profile.weights, dtype=np.float64)[:, None, None]
    return w * g[idx], w * s[idx]


def scatter_weighted_grad(grad_w, profile: ImportanceProfile, n_maps: int) -> np.ndarray:
    """Chain a gradient on ``S^w`` back to the full stack ``S`` (zeros for dropped maps)."""
    grad_w = np.asarray(grad_w)
    out = np.zeros((n_maps,) + grad_w.shape[1:])
    out[list(profile.selected)] = np.asarray(profile.weights)[:, None, None] * grad_w
    return out
