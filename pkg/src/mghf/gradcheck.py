"""Finite-difference verification of every analytic gradient in the package.

Each check draws a seeded random problem, evaluates the analytic gradient and
compares it against central differences of the scalar loss. Quantities that
are held constant during differentiation (importance profile, transport plans)
are frozen at their base-point values for the finite-difference probe too.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import csc, lip
from .config import DfeConfig, LipConfig, MghfConfig, MonceConfig
from .dfe import dfe_extract, dfe_vjp, init_model
from .numerics import finite_diff_grad, make_rng, relative_error
from .objective import mghf_c_detailed, mghf_n

LOSS_TOL = 1e-4
E2E_TOL = 1e-3
EPS = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    point: int
    rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tol


def _stacks(rng, m=3, h=4, w=5):
    return rng.normal(size=(m, h, w)), rng.normal(size=(m, h, w))


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def check_stack_loss(loss_fn, rng):
    g, s = _stacks(rng)
    _, analytic = loss_fn(g, s)
    numeric = finite_diff_grad(lambda x: loss_fn(g, x)[0], s, EPS)
    return relative_error(analytic, numeric)


def check_monce(rng, cfg=None):
    cfg = cfg or MonceConfig()
    n = int(rng.integers(2, 9))
    s, g = _unit(rng, n, 6), _unit(rng, n, 6)
    plan = lip.sinkhorn(lip.cost_matrix(s, g, cfg.beta_ot), cfg)
    _, analytic = lip.monce_loss(s, g, plan, cfg)
    numeric = finite_diff_grad(lambda x: lip.monce_loss(x, g, plan, cfg)[0], s, EPS)
    return relative_error(analytic, numeric)


def check_lip(rng, cfg=None):
    cfg = cfg or MonceConfig()
    g, s = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    head = lip.EmbeddingHead.create(4, 8, 8, seed=int(rng.integers(1 << 31)))
    base = lip.lip_loss(g, s, head, cfg, patch_size=2, stride=2)
    numeric = finite_diff_grad(
        lambda x: lip.lip_loss(g, x, head, cfg, patch_size=2, stride=2, plans=base.plans).loss, s, EPS)
    return relative_error(base.grad, numeric)


def check_dfe_vjp(rng):
    model = init_model(DfeConfig(n_channels=4), identity=False, seed=int(rng.integers(1 << 31)))
    image = rng.uniform(size=(3, 6, 6))
    weights = rng.normal(size=(4, 6, 6))
    analytic = dfe_vjp(model, image, weights)
    numeric = finite_diff_grad(lambda x: float(np.sum(weights * dfe_extract(model, x))), image, EPS)
    return relative_error(analytic, numeric)


def desk_config() -> MghfConfig:
    return MghfConfig(lip=LipConfig(patch_size=2, stride=2, embed_hidden=8, embed_dim=8))


def check_mghf_c(rng, cfg: MghfConfig | None = None):
    cfg = cfg or desk_config()
    model = init_model(DfeConfig(n_channels=4), identity=False, seed=int(rng.integers(1 << 31)))
    x_gt = rng.uniform(size=(3, 8, 8))
    x_sr = np.clip(x_gt + 0.1 * rng.normal(size=x_gt.shape), 0.0, 1.0)
    report, analytic, frozen = mghf_c_detailed(model, x_gt, x_sr, cfg)

    def f(x):
        return mghf_c_detailed(model, x_gt, x, cfg, frozen=frozen)[0].mghf_c

    return relative_error(analytic, finite_diff_grad(f, x_sr, EPS))


CHECKS: dict[str, tuple[Callable, float]] = {
    "mse_content": (lambda rng: check_stack_loss(csc.mse_content, rng), LOSS_TOL),
    "corr_loss": (lambda rng: check_stack_loss(csc.corr_loss, rng), LOSS_TOL),
    "gram_loss": (lambda rng: check_stack_loss(csc.gram_loss, rng), LOSS_TOL),
    "mghf_n": (lambda rng: check_stack_loss(mghf_n, rng), LOSS_TOL),
    "monce_loss": (check_monce, LOSS_TOL),
    "dfe_vjp": (check_dfe_vjp, LOSS_TOL),
    "lip_loss": (check_lip, E2E_TOL),
    "mghf_c": (check_mghf_c, E2E_TOL),
}


def run_matrix(seed: int = 0, points: int = 10, tol: float | None = None, names=None) -> list[CheckResult]:
    """Run every check at ``points`` seeded problems; ``tol`` overrides the per-check tolerance."""
    results = []
    for ci, (name, (fn, default_tol)) in enumerate(CHECKS.items()):
        if names is not None and name not in names:
            continue
        for p in range(points):
            err = fn(make_rng(seed, 5, ci, p))
            results.append(CheckResult(name, p, err, default_tol if tol is None else tol))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<12} {'point':>5} {'rel_error':>12} {'tol':>9}  status"]
    for r in results:
        lines.append(f"{r.name:<12} {r.point:>5} {r.rel_error:>12.3e} {r.tol:>9.1e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
