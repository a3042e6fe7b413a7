"""Dense float64 tensor helpers shared by every other module.

Tensors are plain ``numpy`` arrays in (channels, height, width) order; a leading
batch axis is accepted wherever noted. Nothing here keeps state.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} array, got shape {arr.shape}")
    return arr


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64) keyed by ``seed`` and an optional stream path.

    The key is derived through ``SeedSequence`` so the draw sequence is fixed
    for a given (seed, stream) on every platform numpy supports.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def _check_conv_args(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, padding: int):
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be rank 4 [out, in, kh, kw], got {kernel.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    out_ch, in_ch, kh, kw = kernel.shape
    if x.shape[-3] != in_ch:
        raise ShapeError(f"kernel expects {in_ch} input channels, input has {x.shape[-3]}")
    if bias.shape != (out_ch,):
        raise ShapeError(f"bias must have shape ({out_ch},), got {bias.shape}")
    if padding < 0:
        raise ShapeError("padding must be >= 0")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kh}x{kw}")
    h, w = x.shape[-2:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")


def _pad(x: np.ndarray, ph: int, pw: int | None = None) -> np.ndarray:
    """Zero-pad the two spatial axes of a (B, C, H, W) array (cheaper than np.pad)."""
    pw = ph if pw is None else pw
    if ph == 0 and pw == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw))
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (C * kh * kw, B * Ho * Wo) receptive-field columns."""
    b, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.empty((c, kh, kw, b, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xt[:, :, dy:dy + ho, dx:dx + wo]
    return cols.reshape(c * kh * kw, b * ho * wo)


def conv2d_cols(x, kernel, bias, padding: int = 0):
    """As :func:`conv2d`, also returning the im2col matrix for reuse in the backward pass."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _check_conv_args(x, kernel, bias, padding)
    single = x.ndim == 3
    xb = _pad(x[None] if single else x, padding)
    out_ch, _, kh, kw = kernel.shape
    b = xb.shape[0]
    ho, wo = xb.shape[2] - kh + 1, xb.shape[3] - kw + 1
    cols = _im2col(xb, kh, kw)
    out = kernel.reshape(out_ch, -1) @ cols + bias[:, None]
    out = np.ascontiguousarray(out.reshape(out_ch, b, ho, wo).transpose(1, 0, 2, 3))
    return (out[0] if single else out), cols


def conv2d(x, kernel, bias, padding: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernel`` is (out, in, kh, kw).
    The output keeps the input's rank.
    """
    return conv2d_cols(x, kernel, bias, padding)[0]


def _input_grad(g: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    """Input gradient of a padded conv: correlate ``g`` with the flipped, transposed kernel."""
    out_ch, in_ch, kh, kw = kernel.shape
    flipped = kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(in_ch, -1)
    ph, pw = kh - 1 - padding, kw - 1 - padding
    crop_h, crop_w = max(-ph, 0), max(-pw, 0)
    ph, pw = max(ph, 0), max(pw, 0)
    gp = _pad(g, ph, pw)
    b = g.shape[0]
    hp, wp = gp.shape[2] - kh + 1, gp.shape[3] - kw + 1
    full = (flipped @ _im2col(gp, kh, kw)).reshape(in_ch, b, hp, wp).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(full[:, :, crop_h:hp - crop_h, crop_w:wp - crop_w])


def conv2d_backward(x, kernel, grad_out, padding: int = 0, need_input: bool = True, cols=None):
    """Gradients of ``conv2d`` with respect to input, kernel and bias.

    Returns ``(grad_x, grad_kernel, grad_bias)``; batch contributions are summed
    into the kernel and bias gradients. With ``need_input=False`` the input
    gradient is skipped and returned as ``None``. ``cols`` may carry the
    columns saved by :func:`conv2d_cols` for the same input.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x, g = x[None], g[None]
    xp = _pad(x, padding)
    out_ch, in_ch, kh, kw = kernel.shape
    b, _, ho, wo = g.shape
    if xp.shape[2] - kh + 1 != ho or xp.shape[3] - kw + 1 != wo or g.shape[1] != out_ch:
        raise ShapeError(f"grad_out shape {g.shape} does not match conv output")
    g_mat = g.transpose(1, 0, 2, 3).reshape(out_ch, b * ho * wo)
    if cols is None:
        cols = _im2col(xp, kh, kw)
    grad_k = (cols @ g_mat.T).T.reshape(kernel.shape)
    grad_b = g.sum(axis=(0, 2, 3))
    if not need_input:
        return None, grad_k, grad_b
    grad_x = _input_grad(g, kernel, padding)
    return (grad_x[0] if single else grad_x), grad_k, grad_b


def leaky_relu(x, slope: float = 0.2) -> np.ndarray:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, slope * x)


def leaky_relu_backward(x, grad_out, slope: float = 0.2) -> np.ndarray:
    return np.where(np.asarray(x) > 0, grad_out, slope * np.asarray(grad_out))


def avg_pool2(x) -> np.ndarray:
    """2x2 average pooling with stride 2 over the last two axes (odd trailing rows dropped)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def avg_pool2_backward(input_shape, grad_out) -> np.ndarray:
    grad = np.zeros(input_shape)
    q = 0.25 * np.asarray(grad_out)
    h, w = q.shape[-2] * 2, q.shape[-1] * 2
    for oy in (0, 1):
        for ox in (0, 1):
            grad[..., oy:h:2, ox:w:2] = q
    return grad


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor), Euclidean over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_finite(x, what: str = "value") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite {what}")
