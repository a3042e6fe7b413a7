"""Top-level perceptual objectives and the loss report.

``mghf_n`` is plain MSE between detail stacks. ``mghf_c`` adds the
content-style terms on the pruned, reweighted maps and the patch-contrast
term on the full stacks, then pulls the combined feature gradient back to the
candidate image through the extractor.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import csc, pruning
from .config import MghfConfig
from .dfe import DfeModel, dfe_extract, dfe_vjp
from .lip import EmbeddingHead, TransportPlan, lip_loss
from .numerics import ShapeError, check_finite
from .pruning import ImportanceProfile


def mghf_n(g, s):
    g = np.asarray(g, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if g.shape != s.shape:
        raise ShapeError(f"feature stacks differ in shape: {g.shape} vs {s.shape}")
    diff = s - g
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def total_with_lambdas(n_loss: float, csc_loss: float, lip: float, cfg: MghfConfig | None = None) -> float:
    cfg = cfg or MghfConfig()
    return cfg.gamma1 * n_loss + cfg.gamma2 * csc_loss + cfg.gamma3 * lip


def embedding_head_for(cfg: MghfConfig) -> EmbeddingHead:
    lc = cfg.lip
    return EmbeddingHead.create(lc.patch_size ** 2, lc.embed_hidden, lc.embed_dim, lc.embed_seed)


@dataclass
class LossReport:
    mghf_n: float
    csc: dict | None = None  # mse, corr, gram, total
    lip: float | None = None
    mghf_c: float | None = None
    profile: ImportanceProfile | None = None
    lip_converged: bool | None = None
    lip_residual: float | None = None
    config: MghfConfig = field(default_factory=MghfConfig)
    durations_ms: dict = field(default_factory=dict)

    @property
    def csc_total(self) -> float | None:
        return None if self.csc is None else self.csc["total"]

    def consistent(self, atol: float = 1e-12) -> bool:
        if self.mghf_c is None:
            return True
        expect = total_with_lambdas(self.mghf_n, self.csc_total, self.lip or 0.0, self.config)
        return abs(self.mghf_c - expect) <= atol


@dataclass
class _Frozen:
    """Non-differentiated quantities of one evaluation, reusable to probe the gradient."""

    profile: ImportanceProfile
    plans: Sequence[TransportPlan] | None


def _evaluate(model, g, x_sr, cfg, head, frozen: _Frozen | None):
    timings = {}
    t0 = time.perf_counter()
    s = dfe_extract(model, x_sr)
    timings["extract"] = (time.perf_counter() - t0) * 1e3

    n_loss, grad = mghf_n(g, s)
    grad = cfg.gamma1 * grad

    t0 = time.perf_counter()
    profile = frozen.profile if frozen else pruning.build_profile(g, s, cfg.pruning)
    gw, sw = pruning.apply_weights(g, s, profile)
    terms, g_sw = csc.csc_terms(gw, sw, cfg.csc)
    grad += cfg.gamma2 * pruning.scatter_weighted_grad(g_sw, profile, len(s))
    timings["csc"] = (time.perf_counter() - t0) * 1e3

    lip_value, lip_result = 0.0, None
    if cfg.use_lip:
        t0 = time.perf_counter()
        lc = cfg.lip
        lg, ls = (gw, sw) if lc.on_pruned else (g, s)
        lip_result = lip_loss(lg, ls, head, cfg.monce, patch_size=lc.patch_size, stride=lc.stride,
                              plans=frozen.plans if frozen else None)
        lip_value = lip_result.loss
        lg_grad = lip_result.grad
        if lc.on_pruned:
            lg_grad = pruning.scatter_weighted_grad(lg_grad, profile, len(s))
        grad += cfg.gamma3 * lg_grad
        timings["lip"] = (time.perf_counter() - t0) * 1e3

    total = total_with_lambdas(n_loss, terms["total"], lip_value, cfg)
    report = LossReport(
        mghf_n=n_loss,
        csc=terms,
        lip=lip_value if cfg.use_lip else None,
        mghf_c=total,
        profile=profile,
        lip_converged=lip_result.converged if lip_result else None,
        lip_residual=lip_result.max_residual if lip_result else None,
        config=cfg,
        durations_ms=timings,
    )
    return report, grad, _Frozen(profile, lip_result.plans if lip_result else None)


def _check_pair(x_gt, x_sr):
    x_gt = np.asarray(x_gt, dtype=np.float64)
    x_sr = np.asarray(x_sr, dtype=np.float64)
    if x_gt.shape != x_sr.shape or x_gt.ndim != 3 or x_gt.shape[0] != 3:
        raise ShapeError(f"images must both be (3, H, W) with equal size, got {x_gt.shape} and {x_sr.shape}")
    return x_gt, x_sr


def mghf_c(model: DfeModel, x_gt, x_sr, cfg: MghfConfig | None = None, head: EmbeddingHead | None = None):
    """Comprehensive objective. Returns ``(report, grad_x_sr)``.

    The reference image carries no gradient; importance scores and transport
    plans are held fixed during differentiation.
    """
    report, grad_x, _ = mghf_c_detailed(model, x_gt, x_sr, cfg, head)
    return report, grad_x


def mghf_c_detailed(model, x_gt, x_sr, cfg=None, head=None, frozen: _Frozen | None = None):
    """As :func:`mghf_c`, also returning the frozen profile/plans for gradient probes."""
    cfg = cfg or MghfConfig()
    x_gt, x_sr = _check_pair(x_gt, x_sr)
    if cfg.use_lip and head is None:
        head = embedding_head_for(cfg)
    g = dfe_extract(model, x_gt)
    report, grad_s, frozen_out = _evaluate(model, g, x_sr, cfg, head, frozen)
    t0 = time.perf_counter()
    grad_x = dfe_vjp(model, x_sr, grad_s)
    report.durations_ms["backward"] = (time.perf_counter() - t0) * 1e3
    check_finite(grad_x, "gradient")
    return report, grad_x, frozen_out


def score_n(model: DfeModel, x_gt, x_sr):
    """Naive objective on images. Returns ``(report, grad_x_sr)``."""
    x_gt, x_sr = _check_pair(x_gt, x_sr)
    g = dfe_extract(model, x_gt)
    s = dfe_extract(model, x_sr)
    value, grad_s = mghf_n(g, s)
    return LossReport(mghf_n=value), dfe_vjp(model, x_sr, grad_s)
