"""Procedural toy dataset: 32x32 RGB images of colored shapes, 10 classes.

Class identity is a (shape, palette) pair: five shapes (disk, square,
triangle, plus, ring) times two palettes (warm, cool).  Per-sample variation
comes from position, size, color jitter, a background gradient, and mild
pixel noise, so the autoencoder and diffusion model have non-trivial
structure to learn while staying learnable at toy scale.
"""

from __future__ import annotations

import numpy as np
import torch

NUM_CLASSES = 10

_WARM = np.array([[0.95, 0.35, 0.25], [0.95, 0.75, 0.20], [0.90, 0.45, 0.65]])
_COOL = np.array([[0.25, 0.55, 0.95], [0.25, 0.85, 0.75], [0.55, 0.40, 0.90]])


def _shape_mask(shape_id: int, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape_id == 0:  # disk
        return dx * dx + dy * dy <= radius * radius
    if shape_id == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    if shape_id == 2:  # triangle (upward)
        return (dy <= radius * 0.8) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if shape_id == 3:  # plus
        arm = radius * 0.45
        box = np.maximum(np.abs(dx), np.abs(dy)) <= radius
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if shape_id == 4:  # ring
        d2 = dx * dx + dy * dy
        return (d2 <= radius * radius) & (d2 >= (0.55 * radius) ** 2)
    raise ValueError(f"unknown shape id {shape_id}")


def make_dataset(
    n: int,
    seed: int = 0,
    size: int = 32,
    noise_std: float = 0.02,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate ``n`` labeled images; deterministic given ``seed``.

    Returns ``(images, labels)`` with images float32 in [0, 1] of shape
    (n, 3, size, size) and labels int64 in [0, NUM_CLASSES).
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = rng.integers(0, NUM_CLASSES, size=n)

    ramp = np.linspace(0.0, 1.0, size)[:, None] * np.ones((1, size))
    for i in range(n):
        cls = int(labels[i])
        shape_id, palette_id = cls % 5, cls // 5
        palette = _WARM if palette_id == 0 else _COOL
        color = palette[rng.integers(0, len(palette))] * rng.uniform(0.8, 1.1)
        color = np.clip(color, 0.0, 1.0)

        bg_lo, bg_hi = rng.uniform(0.05, 0.2), rng.uniform(0.2, 0.4)
        bg_tone = rng.uniform(0.6, 1.0, size=3)
        base = (bg_lo + (bg_hi - bg_lo) * ramp)[None, :, :] * bg_tone[:, None, None]

        cx = size / 2 + rng.uniform(-size * 0.15, size * 0.15)
        cy = size / 2 + rng.uniform(-size * 0.15, size * 0.15)
        radius = rng.uniform(size * 0.2, size * 0.33)
        mask = _shape_mask(shape_id, size, cx, cy, radius)

        img = base.copy()
        img[:, mask] = color[:, None]
        img += rng.normal(0.0, noise_std, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))


def split_dataset(
    images: torch.Tensor, labels: torch.Tensor, holdout: int
) -> tuple[tuple[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]:
    """Split off the last ``holdout`` samples as a held-out set."""
    if holdout < 0 or holdout >= len(images):
        raise ValueError("holdout must be in [0, n)")
    cut = len(images) - holdout
    return (images[:cut], labels[:cut]), (images[cut:], labels[cut:])
