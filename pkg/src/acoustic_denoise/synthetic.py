"""Synthetic fixtures: piecewise-constant scenes and fan-shaped masks."""

from __future__ import annotations

import numpy as np

from .image import ImageF, NoiseSpec, add_synthetic_noise


def piecewise_constant_scene(
    height: int, width: int, seed: int, shapes: int = 12, lo: float = 0.15, hi: float = 0.85
) -> ImageF:
    """Random rectangles and ellipses of constant intensity on a flat background."""
    rng = np.random.default_rng(seed)
    img = np.full((height, width), rng.uniform(lo, hi))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(shapes):
        value = rng.uniform(lo, hi)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(0.05, 0.25) * height
        rx = rng.uniform(0.05, 0.25) * width
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[region] = value
    return ImageF(img)


def particle_scene(
    height: int, width: int, seed: int, particles: int = 60, shapes: int = 6
) -> ImageF:
    """Dim piecewise-constant backdrop scattered with small bright particles.

    Mimics a plate covered with particles as seen by an acoustic camera and
    gives a detector plenty of blob-like structure at several scales.
    """
    rng = np.random.default_rng(seed)
    img = piecewise_constant_scene(height, width, seed + 7919, shapes=shapes, lo=0.05, hi=0.35).data.copy()
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(particles):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        rad = rng.uniform(1.5, 5.0)
        value = rng.uniform(0.6, 0.95)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad] = value
    return ImageF(img)


def fan_mask(height: int, width: int, half_angle_deg: float = 30.0) -> np.ndarray:
    """Wedge of an idealised forward-looking sonar, apex at the bottom centre."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = xx - (width - 1) / 2
    dy = (height - 1) - yy
    r = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(np.abs(dx), dy))
    return (ang <= half_angle_deg) & (r <= height - 1) & (r >= 0.1 * height)


def noisy_scene_set(
    count: int, height: int, width: int, sigma: float, seed: int
) -> tuple[list[ImageF], list[ImageF]]:
    """``count`` clean scenes and their Gaussian-noised versions."""
    clean, noisy = [], []
    for i in range(count):
        c = piecewise_constant_scene(height, width, seed=seed * 100003 + i)
        clean.append(c)
        noisy.append(add_synthetic_noise(c, NoiseSpec(gaussian=sigma), seed=seed * 100003 + i + 7))
    return clean, noisy
