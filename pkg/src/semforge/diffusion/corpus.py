"""Synthetic corpus of parametric shapes used as "natural" images.

Images are 32x32, single channel, with pixel values in [-1, 1]. Edges are
soft (about one pixel wide) so most energy sits at low spatial frequencies.
"""

from __future__ import annotations

import numpy as np

from ..numerics import SeededRng

IMAGE_SIZE = 32
NUM_CLASSES = 8
CLASS_NAMES = ("disk", "square", "ring", "hbar", "vbar", "triangle", "cross", "blob")


def _soft(signed_dist: np.ndarray, width: float = 0.8) -> np.ndarray:
    # 1 inside (negative distance), 0 outside
    return 1.0 / (1.0 + np.exp(signed_dist / width))


def render_shape(cls: int, params: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render one image of class ``cls`` from a parameter vector of 6 uniforms."""
    u = np.asarray(params, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy = size / 2 + (u[0] - 0.5) * 12
    cx = size / 2 + (u[1] - 0.5) * 12
    r = 5.0 + 6.0 * u[2]
    background = -0.75 + 0.5 * u[3]
    level = 0.2 + 0.6 * u[4]
    dy, dx = yy - cy, xx - cx

    if cls == 0:
        inside = _soft(np.hypot(dy, dx) - r)
    elif cls == 1:
        inside = _soft(np.maximum(np.abs(dy), np.abs(dx)) - 0.85 * r)
    elif cls == 2:
        inside = _soft(np.abs(np.hypot(dy, dx) - r) - 1.2 - u[5])
    elif cls == 3:
        inside = _soft(np.maximum(np.abs(dy) - 1.5 - 1.5 * u[5], np.abs(dx) - 1.4 * r))
    elif cls == 4:
        inside = _soft(np.maximum(np.abs(dx) - 1.5 - 1.5 * u[5], np.abs(dy) - 1.4 * r))
    elif cls == 5:
        # upward triangle bounded by three half-planes
        d1 = dy - 0.7 * r
        d2 = (-dy - 2 * dx - 1.4 * r) / np.sqrt(5.0)
        d3 = (-dy + 2 * dx - 1.4 * r) / np.sqrt(5.0)
        inside = _soft(np.maximum(np.maximum(d1, d2), d3))
    elif cls == 6:
        arm = 1.2 + 1.0 * u[5]
        h = np.maximum(np.abs(dy) - arm, np.abs(dx) - r)
        v = np.maximum(np.abs(dx) - arm, np.abs(dy) - r)
        inside = _soft(np.minimum(h, v))
    elif cls == 7:
        inside = np.exp(-(dy**2 + dx**2) / (2 * (0.6 * r) ** 2))
    else:
        raise ValueError(f"unknown shape class {cls}")
    return background + (level - background) * inside


def make_corpus(rng: SeededRng, n: int, classes=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` images; returns (images of shape (n, 32, 32), class labels)."""
    if classes is None:
        labels = rng.integers(0, NUM_CLASSES, size=n)
    else:
        labels = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,)).copy()
    params = rng.uniform((n, 6))
    images = np.stack([render_shape(int(c), p) for c, p in zip(labels, params)]) if n else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE))
    return images, labels
