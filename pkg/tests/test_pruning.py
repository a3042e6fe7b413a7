import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mghf.config import PruningConfig
from mghf.numerics import ShapeError, make_rng
from mghf.pruning import (
    ImportanceProfile,
    apply_weights,
    build_profile,
    combined_importance,
    importance_weights,
    normalized_entropy,
    scatter_weighted_grad,
    select_top_m,
)


def uniform_histogram_map(buckets=16, per=4):
    """Values spanning [0, 1] with exactly ``per`` values in each of ``buckets`` equal bins."""
    vals = [(j + (k + 0.5) / (per + 1)) / buckets for j in range(buckets) for k in range(per)]
    vals[0], vals[-1] = 0.0, 1.0
    return np.array(vals).reshape(8, -1)


def entropy_oracle(fmap, bins):
    """Histogram via np.histogram over the map's own range, then -sum p log p / log(bins)."""
    v = np.asarray(fmap).ravel()
    counts, _ = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    p = counts / v.size
    return sum(-q * math.log(q) for q in p if q > 0) / math.log(bins)


def test_constant_map_zero_entropy():
    assert normalized_entropy(np.full((5, 5), 3.2)) == 0.0


def test_uniform_histogram_is_one():
    assert normalized_entropy(uniform_histogram_map(), 16) == pytest.approx(1.0, abs=1e-12)


def test_entropy_matches_direct_oracle():
    for seed in range(5):
        m = make_rng(seed).normal(size=(8, 8))
        assert abs(normalized_entropy(m, 64) - entropy_oracle(m, 64)) < 1e-10


def test_entropy_bins_validated():
    with pytest.raises(ValueError):
        normalized_entropy(np.ones((2, 2)), 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=64), st.integers(-6, 6), st.integers(-100, 100))
def test_entropy_bounded_and_affine_invariant(values, log2_scale, shift):
    # integer maps, power-of-two scales and integer shifts keep the rescaling exact
    m = np.array(values, dtype=np.float64)
    h = normalized_entropy(m, 16)
    assert 0.0 <= h <= 1.0
    assert normalized_entropy(m * 2.0 ** log2_scale + shift, 16) == h


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=100), st.integers(2, 128))
def test_entropy_range_on_arbitrary_floats(values, bins):
    assert 0.0 <= normalized_entropy(np.array(values), bins) <= 1.0


def test_combined_importance_extremes():
    const = np.full((1, 8, 8), 2.0)
    assert combined_importance(const, const)[0] == 1.0
    u = uniform_histogram_map()[None]
    assert combined_importance(u, u, 16)[0] == pytest.approx(0.0, abs=1e-12)


def test_combined_importance_mixed():
    # one map constant (H=0), the other uniform (H=1): (1 + 0) / 2
    const = np.zeros((1, 8, 8))
    u = uniform_histogram_map()[None]
    assert combined_importance(const, u, 16)[0] == pytest.approx(0.5, abs=1e-12)


def test_combined_importance_shape_mismatch():
    with pytest.raises(ShapeError):
        combined_importance(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


def test_select_top_m_examples():
    assert select_top_m([0.1, 0.9, 0.5], 2) == (1, 2)
    assert select_top_m([0.3, 0.3, 0.3], 2) == (0, 1)
    with pytest.raises(ValueError):
        select_top_m([0.1, 0.2], 0)
    with pytest.raises(ValueError):
        select_top_m([0.1, 0.2], 3)


def brute_force_top_m(importance, m):
    ranked = sorted(range(len(importance)), key=lambda i: (-importance[i], i))
    return tuple(sorted(ranked[:m]))


def test_select_top_m_matches_sort_oracle():
    for seed in range(20):
        imp = make_rng(seed).uniform(size=12)
        assert select_top_m(imp, 5) == brute_force_top_m(list(imp), 5)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=12), st.data())
def test_select_top_m_ties_follow_lowest_index(importance, data):
    m = data.draw(st.integers(1, len(importance)))
    assert select_top_m(importance, m) == brute_force_top_m(importance, m)


def _profile(selected, scores, alpha, gamma):
    scores = np.asarray(scores, dtype=float)
    w = importance_weights(scores[list(selected)], alpha, gamma)
    z = np.zeros(len(scores))
    return ImportanceProfile(z, z, scores, tuple(selected), w, alpha, gamma, 64)


def test_weight_arithmetic():
    assert importance_weights([0.7], 0.0, 3.0)[0] == 1.0
    assert importance_weights([0.5], 1.0, 1.0)[0] == 1.5
    assert importance_weights([1.0], 1.0, 2.0)[0] == 4.0


def test_apply_weights_selects_and_scales():
    rng = make_rng(3)
    g, s = rng.normal(size=(2, 4, 3, 3))
    prof = _profile((1, 3), [0.1, 0.5, 0.2, 1.0], 1.0, 2.0)
    gw, sw = apply_weights(g, s, prof)
    np.testing.assert_allclose(gw, [2.25 * g[1], 4.0 * g[3]])
    np.testing.assert_allclose(sw, [2.25 * s[1], 4.0 * s[3]])


def test_apply_weights_alpha_zero_is_pure_selection():
    rng = make_rng(4)
    g, s = rng.normal(size=(2, 5, 3, 3))
    gw, sw = apply_weights(g, s, _profile((0, 2, 4), np.linspace(0, 1, 5), 0.0, 1.7))
    np.testing.assert_array_equal(gw, g[[0, 2, 4]])
    np.testing.assert_array_equal(sw, s[[0, 2, 4]])


def test_apply_weights_homogeneous():
    rng = make_rng(5)
    g, s = rng.normal(size=(2, 4, 3, 3))
    prof = _profile((0, 1), [0.2, 0.8, 0.1, 0.0], 1.0, 1.0)
    scaled = ImportanceProfile(prof.h_norm_g, prof.h_norm_s, prof.combined, prof.selected,
                               3.0 * prof.weights, 1.0, 1.0, 64)
    np.testing.assert_allclose(apply_weights(g, s, scaled)[1], 3.0 * apply_weights(g, s, prof)[1])


def test_apply_weights_invalid_indices():
    g = np.zeros((3, 2, 2))
    with pytest.raises(ValueError):
        apply_weights(g, g, _profile((0, 5), [0.0] * 6, 1.0, 1.0))


def test_build_profile_defaults():
    rng = make_rng(6)
    g, s = rng.normal(size=(2, 7, 6, 6))
    prof = build_profile(g, s, PruningConfig())
    assert prof.m == 4  # ceil(7 / 2)
    assert list(prof.selected) == sorted(prof.selected)
    np.testing.assert_allclose(prof.combined, ((1 - prof.h_norm_g) + (1 - prof.h_norm_s)) / 2)
    np.testing.assert_allclose(prof.weights, (1 + prof.alpha * prof.combined[list(prof.selected)]) ** prof.gamma)


def test_scatter_weighted_grad_is_adjoint():
    rng = make_rng(7)
    prof = _profile((1, 2), [0.1, 0.6, 0.9], 1.0, 1.0)
    s = rng.normal(size=(3, 2, 2))
    gw = rng.normal(size=(2, 2, 2))
    _, sw = apply_weights(s, s, prof)
    assert np.sum(sw * gw) == pytest.approx(np.sum(s * scatter_weighted_grad(gw, prof, 3)), rel=1e-12)
