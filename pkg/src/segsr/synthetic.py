"""Procedural RGB scenes for offline demos and tests (no dataset download needed)."""
from pathlib import Path

import numpy as np
from PIL import Image


def synthetic_scene(size, rng) -> np.ndarray:
    """``size x size x 3`` uint8 image: smooth gradient, rectangles, stripes and a disc."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    base = rng.uniform(0.2, 0.8, 3)
    slope = rng.uniform(-0.3, 0.3, (2, 3))
    img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, size - 4, 2)
        y1, x1 = y0 + rng.integers(3, size // 2), x0 + rng.integers(3, size // 2)
        img[y0:y1, x0:x1] = rng.uniform(0, 1, 3)
    period = rng.uniform(3, 9)
    angle = rng.uniform(0, np.pi)
    phase = (np.cos(angle) * xx + np.sin(angle) * yy) * size / period
    stripes = (np.sin(2 * np.pi * phase) > 0)[..., None]
    y0, x0 = rng.integers(0, size // 2, 2)
    region = np.zeros((h, w, 1), bool)
    region[y0:y0 + size // 2, x0:x0 + size // 2] = True
    img = np.where(region & stripes, img * 0.4, img)
    cy, cx, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.2)
    disc = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)[..., None]
    img = np.where(disc, rng.uniform(0, 1, 3), img)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_dataset(root, classes=3, per_class=4, size=64, seed=0) -> Path:
    """Write ``classes`` class folders of ``per_class`` PNG scenes under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(classes):
        d = root / f"class{c:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(synthetic_scene(size, rng)).save(d / f"img{i:03d}.png")
    return root
