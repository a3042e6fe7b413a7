"""Invertible detail feature extractor.

A 3x3 convolution lifts the RGB image to ``N`` channels, then ``K`` affine
coupling layers transform the lifted tensor bijectively. Every output channel
is one single-channel detail map, so an extracted feature stack is simply an
``(N, H, W)`` array.

Each coupling layer holds three shallow CNNs acting on the halves
``x1 = x[:N/2]`` and ``x2 = x[N/2:]``::

    y1 = x1 * exp(s(x2)) + t(x2)      s = clamp * tanh(scale_net(x2) / clamp)
    y2 = x2 + update_net(y1)

and is undone by ``x2 = y2 - update_net(y1)``, ``x1 = (y1 - t(x2)) * exp(-s(x2))``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import REFERENCE_PARAM_COUNT, DfeConfig
from .numerics import (
    ShapeError,
    conv2d,
    conv2d_backward,
    conv2d_cols,
    leaky_relu,
    leaky_relu_backward,
    make_rng,
)

SLOPE = 0.2
MAGIC = b"MGHF"
CONTAINER_VERSION = 1


@dataclass(frozen=True)
class ShallowCNN:
    """conv(c -> h) -> leaky_relu(0.2) -> conv(h -> c), both 'same' padded."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def padding(self) -> int:
        return self.w1.shape[-1] // 2

    def forward(self, x):
        h, cols1 = conv2d_cols(x, self.w1, self.b1, self.padding)
        a = leaky_relu(h, SLOPE)
        y, cols2 = conv2d_cols(a, self.w2, self.b2, self.padding)
        return y, (x, h, a, cols1, cols2)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        x, h, a, cols1, cols2 = cache
        ga, gw2, gb2 = conv2d_backward(a, self.w2, grad_out, self.padding, cols=cols2)
        gh = leaky_relu_backward(h, ga, SLOPE)
        gx, gw1, gb1 = conv2d_backward(x, self.w1, gh, self.padding, cols=cols1)
        return gx, {"conv1.weight": gw1, "conv1.bias": gb1, "conv2.weight": gw2, "conv2.bias": gb2}

    def params(self) -> dict[str, np.ndarray]:
        return {"conv1.weight": self.w1, "conv1.bias": self.b1, "conv2.weight": self.w2, "conv2.bias": self.b2}

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray]) -> "ShallowCNN":
        return cls(p["conv1.weight"], p["conv1.bias"], p["conv2.weight"], p["conv2.bias"])


@dataclass(frozen=True)
class CouplingLayer:
    scale_net: ShallowCNN
    shift_net: ShallowCNN
    update_net: ShallowCNN
    scale_clamp: float = 2.0

    @property
    def split_c(self) -> int:
        return self.scale_net.w2.shape[0]

    def _log_scale(self, raw):
        s = self.scale_clamp * np.tanh(raw / self.scale_clamp)
        assert np.all(np.abs(s) <= self.scale_clamp), "log-scale escaped its clamp"
        return s

    def _split(self, x):
        c = x.shape[-3]
        if c % 2 or c != 2 * self.split_c:
            raise ShapeError(f"coupling layer expects {2 * self.split_c} channels, got {c}")
        return x[..., : c // 2, :, :], x[..., c // 2:, :, :]

    def forward(self, x):
        x1, x2 = self._split(np.asarray(x, dtype=np.float64))
        raw, c_scale = self.scale_net.forward(x2)
        t, c_shift = self.shift_net.forward(x2)
        s = self._log_scale(raw)
        y1 = x1 * np.exp(s) + t
        u, c_update = self.update_net.forward(y1)
        y2 = x2 + u
        cache = (x1, raw, s, c_scale, c_shift, c_update)
        return np.concatenate([y1, y2], axis=-3), cache

    def inverse(self, y):
        y1, y2 = self._split(np.asarray(y, dtype=np.float64))
        x2 = y2 - self.update_net(y1)
        s = self._log_scale(self.scale_net(x2))
        x1 = (y1 - self.shift_net(x2)) * np.exp(-s)
        return np.concatenate([x1, x2], axis=-3)

    def backward(self, cache, grad_out):
        x1, raw, s, c_scale, c_shift, c_update = cache
        c = self.split_c
        gy1 = grad_out[..., :c, :, :]
        gy2 = grad_out[..., c:, :, :]
        g_from_update, p_update = self.update_net.backward(c_update, gy2)
        gy1 = gy1 + g_from_update
        es = np.exp(s)
        gx1 = gy1 * es
        th = np.tanh(raw / self.scale_clamp)
        g_raw = gy1 * x1 * es * (1.0 - th * th)
        gx2_s, p_scale = self.scale_net.backward(c_scale, g_raw)
        gx2_t, p_shift = self.shift_net.backward(c_shift, gy1)
        gx2 = gy2 + gx2_s + gx2_t
        grads = {}
        for prefix, p in (("scale", p_scale), ("shift", p_shift), ("update", p_update)):
            for k, v in p.items():
                grads[f"{prefix}.{k}"] = v
        return np.concatenate([gx1, gx2], axis=-3), grads

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("scale", self.scale_net), ("shift", self.shift_net), ("update", self.update_net)):
            for k, v in net.params().items():
                out[f"{prefix}.{k}"] = v
        return out

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray], scale_clamp: float) -> "CouplingLayer":
        nets = [
            ShallowCNN.from_params({k[len(pre) + 1:]: v for k, v in p.items() if k.startswith(pre + ".")})
            for pre in ("scale", "shift", "update")
        ]
        return cls(*nets, scale_clamp=scale_clamp)


def coupling_forward(layer: CouplingLayer, x) -> np.ndarray:
    return layer.forward(x)[0]


def coupling_inverse(layer: CouplingLayer, y) -> np.ndarray:
    return layer.inverse(y)


@dataclass(frozen=True)
class DfeModel:
    expand_w: np.ndarray
    expand_b: np.ndarray
    blocks: tuple[CouplingLayer, ...] = ()
    scale_clamp: float = 2.0

    @property
    def n_channels(self) -> int:
        return self.expand_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.blocks[0].scale_net.w1.shape[0] if self.blocks else self.n_channels // 2

    @property
    def kernel_size(self) -> int:
        return self.expand_w.shape[-1]

    def params(self) -> dict[str, np.ndarray]:
        out = {"expand.weight": self.expand_w, "expand.bias": self.expand_b}
        for i, block in enumerate(self.blocks):
            for k, v in block.params().items():
                out[f"blocks.{i}.{k}"] = v
        return out

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray], scale_clamp: float = 2.0) -> "DfeModel":
        n_blocks = len({k.split(".")[1] for k in p if k.startswith("blocks.")})
        blocks = []
        for i in range(n_blocks):
            pre = f"blocks.{i}."
            sub = {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}
            blocks.append(CouplingLayer.from_params(sub, scale_clamp))
        return cls(p["expand.weight"], p["expand.bias"], tuple(blocks), scale_clamp)

    def meta(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "n_blocks": len(self.blocks),
            "hidden": self.hidden,
            "kernel_size": self.kernel_size,
            "scale_clamp": self.scale_clamp,
        }


def _conv_init(rng, out_ch, in_ch, k, gain=1.0):
    std = gain / np.sqrt(in_ch * k * k)
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), np.zeros(out_ch)


def init_model(cfg: DfeConfig | None = None, *, identity: bool = True, seed: int | None = None) -> DfeModel:
    """Build a seeded model.

    With ``identity=True`` every shallow CNN's last convolution is zero, so each
    coupling layer starts as the identity map. ``identity=False`` draws all
    weights at random (biases too), which the round-trip tests rely on.
    """
    cfg = cfg or DfeConfig()
    rng = make_rng(cfg.seed if seed is None else seed, 1)
    n, c, h, k = cfg.n_channels, cfg.n_channels // 2, cfg.hidden_width, cfg.kernel_size
    ew, eb = _conv_init(rng, n, 3, k)
    blocks = []
    for _ in range(cfg.n_blocks):
        nets = []
        for _ in range(3):
            w1, b1 = _conv_init(rng, h, c, k, gain=np.sqrt(2.0))
            if identity:
                w2, b2 = np.zeros((c, h, k, k)), np.zeros(c)
            else:
                w2, b2 = _conv_init(rng, c, h, k, gain=0.5)
                b1 = rng.normal(0.0, 0.1, size=h)
                b2 = rng.normal(0.0, 0.1, size=c)
            nets.append(ShallowCNN(w1, b1, w2, b2))
        blocks.append(CouplingLayer(*nets, scale_clamp=cfg.scale_clamp))
    return DfeModel(ew, eb, tuple(blocks), cfg.scale_clamp)


def _forward(model: DfeModel, x):
    z = conv2d(x, model.expand_w, model.expand_b, model.kernel_size // 2)
    caches = []
    for block in model.blocks:
        z, cache = block.forward(z)
        caches.append(cache)
    return z, caches


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise ShapeError(f"image must have exactly 3 channels, got shape {image.shape}")
    return image


def dfe_extract(model: DfeModel, image) -> np.ndarray:
    """Detail maps of a (3, H, W) image (or a batch) as an (N, H, W) stack."""
    return _forward(model, _check_image(image))[0]


def dfe_inverse(model: DfeModel, features) -> np.ndarray:
    """Undo the coupling layers, returning the lifted tensor the blocks received."""
    z = np.asarray(features, dtype=np.float64)
    for block in reversed(model.blocks):
        z = block.inverse(z)
    return z


def dfe_backward(model: DfeModel, image, cotangent, _cache=None, need_image_grad: bool = True):
    """Pull ``cotangent`` back through the extractor.

    Returns ``(grad_image, grad_params)`` where ``grad_params`` is keyed like
    :meth:`DfeModel.params`. ``grad_image`` is ``None`` when ``need_image_grad``
    is false (parameter training does not use it).
    """
    image = _check_image(image)
    out, caches = _cache if _cache is not None else _forward(model, image)
    g = np.asarray(cotangent, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError(f"cotangent shape {g.shape} does not match features {out.shape}")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(model.blocks))):
        g, bg = model.blocks[i].backward(caches[i], g)
        for k, v in bg.items():
            grads[f"blocks.{i}.{k}"] = v
    gx, gw, gb = conv2d_backward(image, model.expand_w, g, model.kernel_size // 2, need_image_grad)
    grads["expand.weight"] = gw
    grads["expand.bias"] = gb
    return gx, {k: grads[k] for k in model.params()}


def dfe_vjp(model: DfeModel, image, cotangent) -> np.ndarray:
    """Gradient of sum(cotangent * dfe_extract(model, image)) with respect to the image."""
    return dfe_backward(model, image, cotangent)[0]


def param_count(model: DfeModel) -> int:
    return int(sum(v.size for v in model.params().values()))


def dfe_param_report(model: DfeModel) -> dict:
    """Exact parameter count, conv multiply-accumulates per pixel, and container size."""
    k2 = model.kernel_size ** 2
    macs = 3 * model.n_channels * k2
    for block in model.blocks:
        for net in (block.scale_net, block.shift_net, block.update_net):
            macs += net.w1[0].size * net.w1.shape[0] + net.w2[0].size * net.w2.shape[0]
    return {
        "param_count": param_count(model),
        "flops_per_pixel": int(macs),
        "bytes": len(dumps_weights(model)),
        "reference_param_count": REFERENCE_PARAM_COUNT,
        "n_channels": model.n_channels,
        "n_blocks": len(model.blocks),
        "hidden": model.hidden,
    }


def dumps_weights(model: DfeModel) -> bytes:
    """Serialize to the MGHF weights container (float32 payload)."""
    params = model.params()
    header = {
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "meta": model.meta(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([CONTAINER_VERSION]))
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for v in params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return buf.getvalue()


class WeightsFormatError(ValueError):
    pass


def loads_weights(data: bytes) -> DfeModel:
    if len(data) < 9 or data[:4] != MAGIC:
        raise WeightsFormatError("not an MGHF weights container (bad magic)")
    if data[4] != CONTAINER_VERSION:
        raise WeightsFormatError(f"unsupported container version {data[4]}")
    (hlen,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"corrupt header: {exc}") from None
    offset = 9 + hlen
    params = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = data[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise WeightsFormatError(f"truncated payload for {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        offset += 4 * n
    if offset != len(data):
        raise WeightsFormatError("trailing bytes after payload")
    return DfeModel.from_params(params, float(header.get("meta", {}).get("scale_clamp", 2.0)))


def save_weights(model: DfeModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps_weights(model))


def load_weights(path: str | Path) -> DfeModel:
    return loads_weights(Path(path).read_bytes())
