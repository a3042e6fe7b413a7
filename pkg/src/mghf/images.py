"""Image ingestion: 8-bit PNG (RGB or grayscale) and binary PPM (P6).

Decoded images are float64 arrays of shape (3, H, W) with values ``v / 255``.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def _png_bit_depth(data: bytes) -> int:
    # IHDR is always the first chunk: length, type, width, height, bit depth, ...
    if len(data) < 26 or data[12:16] != b"IHDR":
        raise ImageFormatError("PNG without a leading IHDR chunk")
    return data[24]


def _ppm_maxval(data: bytes) -> int:
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    try:
        return int(tokens[2])
    except ValueError:
        raise ImageFormatError("bad PPM maxval") from None


def decode_image(data: bytes) -> np.ndarray:
    if data.startswith(PNG_SIGNATURE):
        depth = _png_bit_depth(data)
        if depth != 8:
            raise ImageFormatError(f"only 8-bit PNG is supported, got {depth}-bit")
    elif data.startswith(b"P6"):
        maxval = _ppm_maxval(data)
        if maxval > 255:
            raise ImageFormatError(f"only 8-bit PPM is supported, got maxval {maxval}")
    else:
        raise ImageFormatError("unsupported image format (expected PNG or binary PPM)")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise ImageFormatError(f"unsupported pixel mode {mode!r} (need 8-bit RGB or grayscale)")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"cannot decode image: {exc}") from None
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def to_uint8(image) -> np.ndarray:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_png(image, path: str | Path) -> None:
    Image.fromarray(to_uint8(image), "RGB").save(path, format="PNG")


def encode_ppm(image) -> bytes:
    arr = to_uint8(image)
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()



