"""Tiny image writers: grayscale and paletted label maps, PNG with a
portable-anymap fallback when Pillow is unavailable."""

from __future__ import annotations

import colorsys

import numpy as np

try:
    from PIL import Image
except ImportError:  # pragma: no cover - Pillow is a declared dependency
    Image = None


def normalize_to_u8(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255]; a constant map comes out black."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_grayscale(path, values: np.ndarray) -> str:
    """Write a 2D array as a grayscale image; larger values render lighter.

    Returns the path actually written (extension may switch to .pgm on the
    fallback path).
    """
    u8 = normalize_to_u8(values)
    path = str(path)
    if Image is not None:
        Image.fromarray(u8, mode="L").save(path)
        return path
    fallback = _with_ext(path, ".pgm")
    with open(fallback, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (u8.shape[1], u8.shape[0]))
        fh.write(u8.tobytes())
    return fallback


def label_palette(num_classes: int) -> np.ndarray:
    """(C, 3) uint8 colors, evenly spread hues; class 0 is dark gray."""
    colors = np.zeros((num_classes, 3), dtype=np.uint8)
    colors[0] = (40, 40, 40)
    for c in range(1, num_classes):
        r, g, b = colorsys.hsv_to_rgb(((c - 1) * 0.618034) % 1.0, 0.75, 0.95)
        colors[c] = (int(r * 255), int(g * 255), int(b * 255))
    return colors


def save_labels(path, labels: np.ndarray, num_classes: int | None = None) -> str:
    """Write a 2D class-index map as a colored image."""
    labels = np.asarray(labels)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    rgb = label_palette(max(c, 1))[labels.clip(0, c - 1)]
    path = str(path)
    if Image is not None:
        Image.fromarray(rgb, mode="RGB").save(path)
        return path
    fallback = _with_ext(path, ".ppm")
    with open(fallback, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        fh.write(rgb.tobytes())
    return fallback


def _with_ext(path: str, ext: str) -> str:
    stem = path.rsplit(".", 1)[0] if "." in path.rsplit("/", 1)[-1] else path
    return stem + ext
