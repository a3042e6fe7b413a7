import dataclasses

import numpy as np
import pytest

from mghf.config import DfeConfig, LipConfig, MghfConfig
from mghf.dfe import dfe_extract, init_model
from mghf.gradcheck import desk_config
from mghf.lip import lip_loss
from mghf.numerics import ShapeError, finite_diff_grad, make_rng, relative_error
from mghf.objective import (
    embedding_head_for,
    mghf_c,
    mghf_c_detailed,
    mghf_n,
    score_n,
    total_with_lambdas,
)


@pytest.fixture
def pair():
    rng = make_rng(77)
    x_gt = rng.uniform(size=(3, 8, 8))
    x_sr = np.clip(x_gt + 0.1 * rng.normal(size=x_gt.shape), 0, 1)
    return x_gt, x_sr


@pytest.fixture
def model():
    return init_model(DfeConfig(n_channels=4), identity=False, seed=5)


def test_mghf_n_examples_and_symmetry():
    rng = make_rng(1)
    g, s = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    assert mghf_n(g, g)[0] == 0.0
    assert mghf_n(g, g - 0.3)[0] == pytest.approx(0.09, rel=1e-13)
    a, ga = mghf_n(g, s)
    b, gb = mghf_n(s, g)
    assert a == b
    np.testing.assert_array_equal(ga, -gb)
    assert a == pytest.approx(sum((x - y) ** 2 for x, y in zip(g.ravel(), s.ravel())) / g.size, rel=1e-13)
    assert relative_error(ga, finite_diff_grad(lambda x: mghf_n(g, x)[0], s)) < 1e-6
    with pytest.raises(ShapeError):
        mghf_n(g, s[:1])


def test_total_with_lambdas():
    assert total_with_lambdas(0, 0, 0) == 0
    assert total_with_lambdas(1, 1, 1) == pytest.approx(3.501, abs=1e-15)


def test_defaults_gamma():
    assert MghfConfig().gammas == (2.0, 1.5, 1e-3)


def test_identity_pair_only_lip_remains(model, pair):
    x, _ = pair
    cfg = desk_config()
    head = embedding_head_for(cfg)
    report, grad = mghf_c(model, x, x, cfg, head)
    assert report.mghf_n == 0.0
    assert report.csc_total == 0.0
    g = dfe_extract(model, x)
    lip = lip_loss(g, g, head, cfg.monce, patch_size=2, stride=2).loss
    assert report.lip == pytest.approx(lip, abs=1e-12)
    assert report.mghf_c == pytest.approx(cfg.gamma3 * lip, abs=1e-12)
    assert report.consistent()


def test_gamma_two_and_three_zero_is_scaled_naive(model, pair):
    cfg = dataclasses.replace(desk_config(), gamma2=0.0, gamma3=0.0)
    report, _ = mghf_c(model, *pair, cfg)
    assert report.mghf_c == cfg.gamma1 * report.mghf_n


def test_report_consistency_and_determinism(model, pair):
    cfg = desk_config()
    r1, g1 = mghf_c(model, *pair, cfg)
    r2, g2 = mghf_c(model, *pair, cfg)
    assert r1.consistent()
    assert r1.mghf_c == r2.mghf_c
    np.testing.assert_array_equal(g1, g2)


def test_end_to_end_gradient_matches_fd(model, pair):
    cfg = desk_config()
    x_gt, x_sr = pair
    _, grad, frozen = mghf_c_detailed(model, x_gt, x_sr, cfg)
    fd = finite_diff_grad(lambda x: mghf_c_detailed(model, x_gt, x, cfg, frozen=frozen)[0].mghf_c, x_sr)
    assert relative_error(grad, fd) < 1e-3


def test_no_lip_mode(model, pair):
    cfg = dataclasses.replace(desk_config(), use_lip=False)
    report, grad = mghf_c(model, *pair, cfg)
    assert report.lip is None
    assert report.consistent()
    x_gt, x_sr = pair
    _, _, frozen = mghf_c_detailed(model, x_gt, x_sr, cfg)
    fd = finite_diff_grad(lambda x: mghf_c_detailed(model, x_gt, x, cfg, frozen=frozen)[0].mghf_c, x_sr)
    assert relative_error(grad, fd) < 1e-3


def test_lip_on_pruned_is_differentiable(model, pair):
    cfg = dataclasses.replace(desk_config(), lip=LipConfig(2, 2, 8, 8, on_pruned=True))
    x_gt, x_sr = pair
    report, grad, frozen = mghf_c_detailed(model, x_gt, x_sr, cfg)
    assert report.consistent()
    fd = finite_diff_grad(lambda x: mghf_c_detailed(model, x_gt, x, cfg, frozen=frozen)[0].mghf_c, x_sr)
    assert relative_error(grad, fd) < 1e-3


def test_lip_patch_error_has_remedy(model):
    x = np.zeros((3, 8, 8))
    with pytest.raises(ValueError, match="enlarge"):
        mghf_c(model, x, x, MghfConfig(lip=LipConfig(patch_size=8, stride=8, embed_hidden=4, embed_dim=4)))


def test_size_mismatch(model):
    with pytest.raises(ShapeError):
        mghf_c(model, np.zeros((3, 8, 8)), np.zeros((3, 8, 9)), desk_config())


def test_score_n_matches_mghf_n(model, pair):
    x_gt, x_sr = pair
    report, grad = score_n(model, x_gt, x_sr)
    assert report.mghf_n == mghf_n(dfe_extract(model, x_gt), dfe_extract(model, x_sr))[0]
    fd = finite_diff_grad(lambda x: score_n(model, x_gt, x)[0].mghf_n, x_sr)
    assert relative_error(grad, fd) < 1e-4
