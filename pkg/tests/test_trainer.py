import math

import numpy as np
import pytest

from mghf.config import DfeConfig, TrainConfig
from mghf.dfe import dumps_weights, init_model
from mghf.numerics import ShapeError, finite_diff_grad, make_rng, relative_error
from mghf.trainer import (
    AdamState,
    ToyDataset,
    adam_step,
    cross_entropy,
    evaluate,
    forward_classify,
    init_head,
    setup,
    train,
)


def test_cross_entropy_uniform():
    for k in (2, 4, 7):
        loss, _ = cross_entropy(np.zeros((3, k)), np.arange(3) % k)
        assert loss == pytest.approx(math.log(k), rel=1e-15)


def test_cross_entropy_margin_limit():
    losses = [cross_entropy(np.array([[m, 0.0, 0.0]]), np.array([0]))[0] for m in (1, 5, 20, 40)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-16


def test_cross_entropy_oracle_and_gradient():
    rng = make_rng(2)
    logits = rng.normal(size=(5, 4)) * 3
    labels = np.array([0, 3, 1, 1, 2])
    loss, grad = cross_entropy(logits, labels)
    oracle = -sum(math.log(math.exp(r[y]) / sum(math.exp(v) for v in r)) for r, y in zip(logits, labels)) / 5
    assert loss == pytest.approx(oracle, abs=1e-12)
    assert relative_error(grad, finite_diff_grad(lambda x: cross_entropy(x, labels)[0], logits)) < 1e-6


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(t=3, m={"w": np.array([0.5, 0.5])}, v={"w": np.array([1.0, 1.0])})
    _, new = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert new.t == 1
    new_p, new_state = adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(new_state.m["w"], 0.45)
    np.testing.assert_allclose(new_state.v["w"], 0.999)
    new_p, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(t=3, m={"w": np.zeros(2)}, v={"w": np.zeros(2)}))
    np.testing.assert_array_equal(new_p["w"], p["w"])


def test_adam_first_step_is_signed_lr():
    cfg = TrainConfig()
    p = {"w": np.zeros(3)}
    g = {"w": np.array([3.0, -0.2, 50.0])}
    new, _ = adam_step(p, g, AdamState(), cfg)
    np.testing.assert_allclose(new["w"], -cfg.lr * np.sign(g["w"]), rtol=1e-6)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(0) == 5e-4
    assert cfg.lr_at(4999) == 5e-4
    assert cfg.lr_at(5000) == pytest.approx(5e-4 * 0.95, rel=1e-15)
    assert cfg.lr_at(10000) == pytest.approx(5e-4 * 0.95 ** 2, rel=1e-15)


def test_forward_classify_shapes_and_zero_head():
    model = init_model(DfeConfig(n_channels=4))
    images, _ = ToyDataset(size=8).batch(0, 2)
    head = init_head(4, 8, 5, seed=1)
    assert forward_classify(model, head, images).shape == (2, 5)
    zero = init_head(4, 8, 5, zero=True)
    assert np.all(forward_classify(model, zero, images) == 0)
    np.testing.assert_array_equal(forward_classify(model, head, images), forward_classify(model, head, images))
    with pytest.raises(ShapeError):
        forward_classify(model, head, np.zeros((2, 1, 8, 8)))


def test_dataset_is_pure_function():
    a = ToyDataset(seed=3, size=8)
    b = ToyDataset(seed=3, size=8)
    np.testing.assert_array_equal(a.sample(17)[0], b.sample(17)[0])
    assert a.sample(17)[1] == 1
    assert not np.array_equal(a.sample(17)[0], ToyDataset(seed=3, size=8, split=1).sample(17)[0])


def test_zero_iterations_leave_model_unchanged():
    cfg = TrainConfig(total_iters=0, image_size=8)
    model, head, data = setup(DfeConfig(n_channels=4), cfg)
    res = train(model, head, data, cfg)
    assert res.curve == []
    assert dumps_weights(res.model) == dumps_weights(model)


def test_short_training_is_deterministic_and_learns():
    cfg = TrainConfig(total_iters=30, image_size=8, batch=8, lr=5e-3, seed=4)
    runs = []
    for _ in range(2):
        model, head, data = setup(DfeConfig(n_channels=4), cfg)
        runs.append(train(model, head, data, cfg))
    assert dumps_weights(runs[0].model) == dumps_weights(runs[1].model)
    assert [c[1] for c in runs[0].curve] == [c[1] for c in runs[1].curve]
    first = np.mean([c[1] for c in runs[0].curve[:5]])
    last = np.mean([c[1] for c in runs[0].curve[-5:]])
    assert last < first
    ce, acc = evaluate(runs[0].model, runs[0].head, ToyDataset(4, 8, 4, split=1), count=16, chunk=8)
    assert np.isfinite(ce) and 0 <= acc <= 1
