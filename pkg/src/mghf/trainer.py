"""Toy pretraining of the detail feature extractor.

The extractor is trained end to end with a small classifier on procedurally
generated textures (oriented gratings and checkerboards), using Adam and a
step-wise exponential learning-rate decay.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import DfeConfig, TrainConfig
from .dfe import DfeModel, _forward, dfe_backward, init_model
from .numerics import (
    NumericalError,
    ShapeError,
    avg_pool2,
    avg_pool2_backward,
    conv2d_backward,
    conv2d_cols,
    leaky_relu,
    leaky_relu_backward,
    make_rng,
)

log = logging.getLogger(__name__)

SLOPE = 0.2


@functools.lru_cache(maxsize=8)
def _grid(n: int):
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy.setflags(write=False)
    xx.setflags(write=False)
    return yy, xx


@dataclass(frozen=True)
class ToyDataset:
    """Seeded texture classes; ``sample(i)`` is a pure function of (seed, split, i)."""

    classes: int = 4
    size: int = 32
    seed: int = 0
    noise: float = 0.1
    split: int = 0  # 0 train, 1 held-out

    def sample(self, index: int):
        label = index % self.classes
        rng = make_rng(self.seed, 3, self.split, index)
        n = self.size
        yy, xx = _grid(n)
        half = math.ceil(self.classes / 2)
        freq = 2.0 * np.pi / rng.uniform(5.0, 7.0)
        if label % 2 == 0:
            theta = np.pi * (label // 2) / half
            u = xx * np.cos(theta) + yy * np.sin(theta)
            pattern = np.sin(freq * u + rng.uniform(0, 2 * np.pi))
        else:
            theta = 0.5 * np.pi * (label // 2) / half
            u = xx * np.cos(theta) + yy * np.sin(theta)
            v = -xx * np.sin(theta) + yy * np.cos(theta)
            pattern = np.sign(np.sin(freq * u + rng.uniform(0, 2 * np.pi)) *
                              np.sin(freq * v + rng.uniform(0, 2 * np.pi)))
        gain = rng.uniform(0.5, 1.0, size=3)
        image = 0.5 + 0.4 * gain[:, None, None] * pattern[None]
        image = image + self.noise * rng.normal(size=(3, n, n))
        return image, label

    def batch(self, start: int, count: int):
        items = [self.sample(start + i) for i in range(count)]
        return np.stack([im for im, _ in items]), np.array([lb for _, lb in items])


@dataclass(frozen=True)
class ClassifierHead:
    """conv3x3 + leaky_relu + 2x2 average pool stages, then a linear layer to class logits."""

    stages: tuple[tuple[np.ndarray, np.ndarray], ...]
    fc_w: np.ndarray
    fc_b: np.ndarray

    @property
    def classes(self) -> int:
        return self.fc_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.stages):
            out[f"stages.{i}.weight"] = w
            out[f"stages.{i}.bias"] = b
        out["fc.weight"] = self.fc_w
        out["fc.bias"] = self.fc_b
        return out

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray]) -> "ClassifierHead":
        n = len({k.split(".")[1] for k in p if k.startswith("stages.")})
        stages = tuple((p[f"stages.{i}.weight"], p[f"stages.{i}.bias"]) for i in range(n))
        return cls(stages, p["fc.weight"], p["fc.bias"])


def init_head(in_channels: int, image_size: int, classes: int, widths=(8, 16), seed: int = 0,
              zero: bool = False) -> ClassifierHead:
    rng = make_rng(seed, 4)
    stages = []
    c, size = in_channels, image_size
    for width in widths:
        std = 0.0 if zero else np.sqrt(2.0 / (c * 9))
        stages.append((rng.normal(0.0, 1.0, size=(width, c, 3, 3)) * std, np.zeros(width)))
        c, size = width, size // 2
    feat = c * size * size
    fc_std = 0.0 if zero else np.sqrt(1.0 / feat)
    return ClassifierHead(tuple(stages), rng.normal(0.0, 1.0, size=(classes, feat)) * fc_std, np.zeros(classes))


def _head_forward(head: ClassifierHead, z):
    caches = []
    for w, b in head.stages:
        h, cols = conv2d_cols(z, w, b, 1)
        caches.append((z, h, cols))
        z = avg_pool2(leaky_relu(h, SLOPE))
    flat = z.reshape(z.shape[0], -1)
    return flat @ head.fc_w.T + head.fc_b, (caches, z.shape, flat)


def _head_backward(head: ClassifierHead, cache, grad_logits):
    caches, pooled_shape, flat = cache
    grads = {"fc.weight": grad_logits.T @ flat, "fc.bias": grad_logits.sum(axis=0)}
    g = (grad_logits @ head.fc_w).reshape(pooled_shape)
    for i in reversed(range(len(head.stages))):
        z, h, cols = caches[i]
        w, _ = head.stages[i]
        g = leaky_relu_backward(h, avg_pool2_backward(h.shape, g), SLOPE)
        g, gw, gb = conv2d_backward(z, w, g, 1, cols=cols)
        grads[f"stages.{i}.weight"] = gw
        grads[f"stages.{i}.bias"] = gb
    return g, grads


def forward_classify(model: DfeModel, head: ClassifierHead, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected a batch of 3-channel images, got {images.shape}")
    z, _ = _forward(model, images)
    return _head_forward(head, z)[0]


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of softmax(logits); returns ``(loss, grad_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must be {b} integers in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    log_p = shifted - log_z[:, None]
    loss = -float(np.mean(log_p[np.arange(b), labels]))
    grad = np.exp(log_p)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig | None = None):
    """One bias-corrected Adam update at the scheduled learning rate for step ``state.t``."""
    cfg = cfg or TrainConfig()
    lr = cfg.lr_at(state.t)
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = cfg.adam_beta1 * state.m.get(name, 0.0) + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * state.v.get(name, 0.0) + (1.0 - cfg.adam_beta2) * g * g
        m_hat = m / (1.0 - cfg.adam_beta1 ** t)
        v_hat = v / (1.0 - cfg.adam_beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


@dataclass
class TrainResult:
    model: DfeModel
    head: ClassifierHead
    curve: list  # (iteration, loss, lr)


def _split_params(params: dict):
    dfe = {k[4:]: v for k, v in params.items() if k.startswith("dfe.")}
    head = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
    return dfe, head


def train(model: DfeModel, head: ClassifierHead, data: ToyDataset, cfg: TrainConfig | None = None,
          log_every: int = 0) -> TrainResult:
    cfg = cfg or TrainConfig()
    params = {f"dfe.{k}": v for k, v in model.params().items()}
    params.update({f"head.{k}": v for k, v in head.params().items()})
    state = AdamState()
    curve = []
    for it in range(cfg.total_iters):
        images, labels = data.batch(it * cfg.batch, cfg.batch)
        z, caches = _forward(model, images)
        logits, hcache = _head_forward(head, z)
        loss, g_logits = cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {it}")
        g_z, head_grads = _head_backward(head, hcache, g_logits)
        _, dfe_grads = dfe_backward(model, images, g_z, _cache=(z, caches), need_image_grad=False)
        grads = {f"dfe.{k}": v for k, v in dfe_grads.items()}
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        curve.append((it, loss, cfg.lr_at(it)))
        params, state = adam_step(params, grads, state, cfg)
        dfe_p, head_p = _split_params(params)
        model = DfeModel.from_params(dfe_p, model.scale_clamp)
        head = ClassifierHead.from_params(head_p)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.4f lr %.2e", it, loss, cfg.lr_at(it))
    return TrainResult(model, head, curve)


def evaluate(model: DfeModel, head: ClassifierHead, data: ToyDataset, count: int = 128, chunk: int = 32):
    """Mean cross-entropy and accuracy over the first ``count`` samples of ``data``."""
    losses, correct = [], 0
    for start in range(0, count, chunk):
        n = min(chunk, count - start)
        images, labels = data.batch(start, n)
        logits = forward_classify(model, head, images)
        losses.append(cross_entropy(logits, labels)[0] * n)
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return sum(losses) / count, correct / count


def setup(dfe_cfg: DfeConfig, cfg: TrainConfig):
    """Seeded initial model, head and training data for a run."""
    dfe_cfg = DfeConfig(**{**dfe_cfg.__dict__, "seed": cfg.seed})
    model = init_model(dfe_cfg)
    head = init_head(model.n_channels, cfg.image_size, cfg.classes, cfg.head_widths, seed=cfg.seed)
    data = ToyDataset(cfg.classes, cfg.image_size, cfg.seed, cfg.noise, split=0)
    return model, head, data
