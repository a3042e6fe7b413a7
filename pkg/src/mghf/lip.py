"""Local information preservation: patch contrast modulated by an OT plan.

For each detail map the candidate (S) and reference (G) maps are cut into
the same grid of patches, projected by a fixed two-layer MLP onto the unit
sphere, and scored with a contrastive loss whose negatives are reweighted by
an entropic transport plan with an excluded diagonal. The plan is computed
from the current embeddings but treated as a constant when differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .config import MonceConfig
from .numerics import ShapeError, leaky_relu, leaky_relu_backward, make_rng

SLOPE = 0.2
LOG_DOMAIN_THRESHOLD = 1e-300


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (rows * cols, patch_size ** 2), row-major grid order
    patch_size: int
    stride: int
    rows: int
    cols: int

    @property
    def n(self) -> int:
        return self.rows * self.cols


def grid_dims(h: int, w: int, patch_size: int, stride: int) -> tuple[int, int]:
    return (h - patch_size) // stride + 1, (w - patch_size) // stride + 1


def extract_patches(fmap, patch_size: int = 32, stride: int = 16) -> PatchGrid:
    a = np.asarray(fmap, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"expected a single (H, W) map, got {a.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = a.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"map {h}x{w} is smaller than the {patch_size}x{patch_size} patch")
    rows, cols = grid_dims(h, w, patch_size, stride)
    win = np.lib.stride_tricks.sliding_window_view(a, (patch_size, patch_size))
    win = win[::stride, ::stride][:rows, :cols]
    return PatchGrid(win.reshape(rows * cols, patch_size * patch_size).copy(), patch_size, stride, rows, cols)


def scatter_patches(grad_patches, grid: PatchGrid, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: overlapping contributions are summed."""
    out = np.zeros(shape)
    p, st = grid.patch_size, grid.stride
    g = np.asarray(grad_patches).reshape(grid.rows, grid.cols, p, p)
    for r in range(grid.rows):
        for c in range(grid.cols):
            out[r * st:r * st + p, c * st:c * st + p] += g[r, c]
    return out


@dataclass(frozen=True)
class EmbeddingHead:
    """Frozen projection: affine -> leaky_relu(0.2) -> affine -> unit length."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def create(cls, in_dim: int, hidden: int = 256, out_dim: int = 256, seed: int = 0,
               zero_bias: bool = False) -> "EmbeddingHead":
        rng = make_rng(seed, 2)
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden, in_dim))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(out_dim, hidden))
        if zero_bias:
            b1, b2 = np.zeros(hidden), np.zeros(out_dim)
        else:
            b1 = rng.normal(0.0, 0.01, size=hidden)
            b2 = rng.normal(0.0, 0.01, size=out_dim)
        return cls(w1, b1, w2, b2)

    def forward(self, patches):
        x = np.asarray(patches.patches if isinstance(patches, PatchGrid) else patches, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"embedding head expects rows of length {self.in_dim}, got {x.shape}")
        z1 = x @ self.w1.T + self.b1
        z2 = leaky_relu(z1, SLOPE) @ self.w2.T + self.b2
        norms = np.sqrt(np.sum(z2 * z2, axis=1))
        out = np.zeros_like(z2)
        live = norms > 0
        out[live] = z2[live] / norms[live, None]
        out[~live, 0] = 1.0  # zero vector maps to the first basis vector
        return out, (z1, z2, norms, out)

    def backward(self, cache, grad_emb):
        z1, z2, norms, out = cache
        g = np.asarray(grad_emb, dtype=np.float64)
        live = norms > 0
        gz2 = np.zeros_like(z2)
        proj = g[live] - out[live] * np.sum(out[live] * g[live], axis=1, keepdims=True)
        gz2[live] = proj / norms[live, None]
        ga = gz2 @ self.w2
        return leaky_relu_backward(z1, ga, SLOPE) @ self.w1


def embed(head: EmbeddingHead, grid) -> np.ndarray:
    return head.forward(grid)[0]


def cost_matrix(anchors, candidates, beta_ot: float = 1.0) -> np.ndarray:
    """exp(<anchor_i, candidate_j> / beta) off the diagonal, +inf on it."""
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if anchors.shape != candidates.shape or anchors.ndim != 2:
        raise ShapeError(f"embedding sets must match, got {anchors.shape} and {candidates.shape}")
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("cost matrix needs at least 2 patches")
    c = np.exp(anchors @ candidates.T / beta_ot)
    np.fill_diagonal(c, np.inf)
    return c


@dataclass(frozen=True)
class TransportPlan:
    a: np.ndarray
    iterations_used: int
    marginal_residual: float
    converged: bool


def uniform_plan(n: int) -> TransportPlan:
    a = np.full((n, n), 1.0 / (n - 1)) if n > 1 else np.zeros((1, 1))
    np.fill_diagonal(a, 0.0)
    return TransportPlan(a, 0, 0.0, True)


def _residual(a) -> float:
    return float(max(np.max(np.abs(a.sum(axis=1) - 1.0)), np.max(np.abs(a.sum(axis=0) - 1.0))))


def _scale_plain(kernel, tol, max_iters):
    n = kernel.shape[0]
    v = np.ones(n)
    hit = False
    it = 0
    for it in range(1, max_iters + 1):
        u = 1.0 / (kernel @ v)
        colsum = kernel.T @ u
        v = 1.0 / colsum
        if np.max(np.abs(u * (kernel @ v) - 1.0)) < tol:
            hit = True
            break
    # dividing by the column mass (rather than multiplying by v) makes a column
    # with a single live entry sum to exactly one
    return (u[:, None] * kernel) / colsum[None, :], it, hit


def _scale_log(log_kernel, tol, max_iters):
    n = log_kernel.shape[0]
    g = np.zeros(n)
    hit = False
    it = 0
    for it in range(1, max_iters + 1):
        f = -logsumexp(log_kernel + g[None, :], axis=1)
        col = logsumexp(log_kernel + f[:, None], axis=0)
        g = -col
        rows = logsumexp(log_kernel + f[:, None] + g[None, :], axis=1)
        if np.max(np.abs(np.expm1(rows))) < tol:
            hit = True
            break
    return np.exp(log_kernel + f[:, None] - col[None, :]), it, hit


def sinkhorn_kernel(kernel, tol: float = 1e-6, max_iters: int = 500, log_kernel=None) -> TransportPlan:
    """Scale a nonnegative kernel (zero diagonal) to unit row and column sums.

    Pass ``log_kernel`` instead of relying on ``kernel`` when entries underflow;
    ``-inf`` there marks excluded cells.
    """
    if log_kernel is not None:
        lk = np.asarray(log_kernel, dtype=np.float64)
        a, it, hit = _scale_log(lk, tol, max_iters)
    else:
        k = np.asarray(kernel, dtype=np.float64)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] < 2:
            raise ShapeError(f"kernel must be square with N >= 2, got {k.shape}")
        a, it, hit = _scale_plain(k, tol, max_iters)
    np.fill_diagonal(a, 0.0)
    if not np.all(np.isfinite(a)):
        return TransportPlan(a, it, float("inf"), False)
    res = _residual(a)
    return TransportPlan(a, it, res, hit or res < tol)


def sinkhorn(cost, cfg: MonceConfig | None = None) -> TransportPlan:
    """Entropic transport plan for a cost matrix whose diagonal is excluded."""
    cfg = cfg or MonceConfig()
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
        raise ValueError(f"cost must be square with N >= 2, got {c.shape}")
    off = ~np.eye(c.shape[0], dtype=bool)
    if not np.all(np.isfinite(c[off])):
        raise ValueError("off-diagonal costs must be finite")
    log_k = np.where(off, -c / cfg.sinkhorn_epsilon, -np.inf)
    if np.min(log_k[off]) < np.log(LOG_DOMAIN_THRESHOLD):
        return sinkhorn_kernel(None, cfg.sinkhorn_tol, cfg.sinkhorn_max_iters, log_kernel=log_k)
    return sinkhorn_kernel(np.exp(log_k), cfg.sinkhorn_tol, cfg.sinkhorn_max_iters)


def _contrast(s_emb, g_emb, log_neg_weight, tau):
    """Shared core: -sum_i log softmax-with-weights of the positive, and d/ds."""
    s = np.asarray(s_emb, dtype=np.float64)
    g = np.asarray(g_emb, dtype=np.float64)
    if s.shape != g.shape or s.ndim != 2:
        raise ShapeError(f"embedding sets must match, got {s.shape} and {g.shape}")
    n = s.shape[0]
    logits = s @ g.T / tau
    z = logits + log_neg_weight
    diag = np.arange(n)
    z[diag, diag] = logits[diag, diag]
    lse = logsumexp(z, axis=1)
    loss = float(np.sum(lse - logits[diag, diag]))
    pi = np.exp(z - lse[:, None])
    pi[diag, diag] -= 1.0
    return loss, pi @ g / tau


def monce_loss(s_emb, g_emb, plan: TransportPlan | np.ndarray, cfg: MonceConfig | None = None):
    """Plan-modulated patch contrast, summed over anchors. Returns ``(loss, grad_s_emb)``."""
    cfg = cfg or MonceConfig()
    a = plan.a if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    n = np.asarray(s_emb).shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"plan shape {a.shape} does not match {n} embeddings")
    with np.errstate(divide="ignore"):
        log_w = np.log(cfg.q * (n - 1) * a)
    return _contrast(s_emb, g_emb, log_w, cfg.tau)


def patchnce_loss(s_emb, g_emb, tau: float = 0.07) -> float:
    n = np.asarray(s_emb).shape[0]
    return _contrast(s_emb, g_emb, np.zeros((n, n)), tau)[0]


class LipResult(NamedTuple):
    loss: float
    grad: np.ndarray
    plans: list
    converged: bool
    max_residual: float


def lip_loss(g, s, head: EmbeddingHead, cfg: MonceConfig | None = None, *, patch_size: int = 32,
             stride: int = 16, plans: Sequence[TransportPlan] | None = None) -> LipResult:
    """Mean per-map modulated contrast over aligned (L, H, W) stacks.

    ``plans`` freezes the transport plans (one per map) instead of recomputing
    them, which is what the analytic gradient assumes.
    """
    cfg = cfg or MonceConfig()
    g = np.asarray(g, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if g.ndim != 3 or g.shape != s.shape:
        raise ShapeError(f"stacks must be aligned (L, H, W) arrays, got {g.shape} and {s.shape}")
    n_maps, h, w = s.shape
    rows, cols = grid_dims(h, w, patch_size, stride) if h >= patch_size and w >= patch_size else (0, 0)
    if rows * cols < 2:
        raise ValueError(
            f"map 0: a {h}x{w} map yields {rows * cols} patch(es) of size {patch_size} "
            f"at stride {stride}; need >= 2 (enlarge the image or shrink patch_size/stride)"
        )
    total = 0.0
    grad = np.zeros_like(s)
    used = []
    for k in range(n_maps):
        gg = extract_patches(g[k], patch_size, stride)
        sg = extract_patches(s[k], patch_size, stride)
        g_emb = embed(head, gg)
        s_emb, cache = head.forward(sg)
        plan = plans[k] if plans is not None else sinkhorn(cost_matrix(s_emb, g_emb, cfg.beta_ot), cfg)
        used.append(plan)
        loss_k, ds = monce_loss(s_emb, g_emb, plan, cfg)
        total += loss_k
        grad[k] = scatter_patches(head.backward(cache, ds), sg, (h, w))
    return LipResult(
        total / n_maps,
        grad / n_maps,
        used,
        all(p.converged for p in used),
        max(p.marginal_residual for p in used),
    )
