"""Small image helpers shared by the model input path and the data pipeline."""

from __future__ import annotations

import numpy as np


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] (or [...,H,W]) array, half-pixel centers."""
    *lead, height, width = image.shape
    if (height, width) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h) + 0.5) * (height / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (width / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, height - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, width - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).reshape(-1, 1)
    wx = np.clip(xs - x0, 0.0, 1.0).reshape(1, -1)

    flat = image.reshape(-1, height, width)
    top = flat[:, y0[:, None], x0[None, :]] * (1 - wx) + flat[:, y0[:, None], x1[None, :]] * wx
    bottom = flat[:, y1[:, None], x0[None, :]] * (1 - wx) + flat[:, y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bottom * wy
    return np.ascontiguousarray(out.reshape(*lead, out_h, out_w), dtype=image.dtype)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_pgm(path, values: np.ndarray):
    """8-bit binary PGM of a 2D array, min-max normalized."""
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.clip(np.rint((values - lo) * scale), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))
