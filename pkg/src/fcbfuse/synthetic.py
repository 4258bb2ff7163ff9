"""Synthetic blob datasets for smoke runs and cross-domain checks."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import SamplePair


def _blob_pair(rng: np.random.Generator, hw: tuple[int, int], shape: str, sid: str) -> SamplePair:
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.3, 0.7) * h
    cx = rng.uniform(0.3, 0.7) * w
    r = rng.uniform(0.15, 0.3) * min(h, w)
    if shape == "circle":
        ry, rx, theta = r, r, 0.0
    elif shape == "ellipse":
        ry, rx, theta = r * rng.uniform(0.5, 0.8), r * rng.uniform(1.0, 1.3), rng.uniform(0, np.pi)
    else:
        raise ValueError(f"unknown blob shape {shape!r}")
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.float32)

    bg = rng.uniform(0.15, 0.45, size=3)
    fg = np.clip(bg + rng.uniform(0.3, 0.5, size=3) * rng.choice([-1, 1]), 0.05, 0.95)
    shade = 0.08 * np.sin(xx / w * rng.uniform(2, 6) + rng.uniform(0, 6)) * np.cos(yy / h * 3)
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None] + shade[None]
    img = img + rng.normal(0, 0.02, size=img.shape)
    img = np.clip(img, 0, 1)
    # round-trip through 8 bits so in-memory and on-disk samples agree
    img = np.round(img * 255) / 255
    return SamplePair(img.astype(np.float32), mask[None], sid)


def blob_dataset(n: int, hw: tuple[int, int] = (64, 64), shape: str = "circle",
                 seed: int = 0, prefix: str | None = None) -> list[SamplePair]:
    """``n`` images with one filled circle or ellipse each and its binary mask."""
    rng = np.random.default_rng(seed)
    prefix = shape if prefix is None else prefix
    return [_blob_pair(rng, hw, shape, f"{prefix}_{i:04d}") for i in range(n)]


def write_dataset(root: str | Path, samples: Sequence[SamplePair]) -> Path:
    """Write samples as ``root/images/<id>.png`` and ``root/masks/<id>.png`` (8-bit)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        mask = np.round(s.mask[0] * 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(mask, "L").save(root / "masks" / f"{s.id}.png")
    return root
