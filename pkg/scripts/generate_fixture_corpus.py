#!/usr/bin/env python3
"""Regenerate the deterministic fixture corpus under assets/fixture_corpus.

Sixteen 96x96 synthetic "photographs" (gradient skies, horizon bands,
simple shapes, textured ground) plus a small style-reference set. Seeded,
so the corpus is reproducible; the repo ships the rendered PNGs.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from styleloop.datasets import save_image  # noqa: E402


def render_scene(seed: int, size: int = 96) -> np.ndarray:
    rng = np.random.default_rng([seed, 5150])
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((3, size, size))

    sky_top = rng.uniform(-0.2, 0.9, size=3)
    sky_bot = rng.uniform(-0.5, 0.6, size=3)
    horizon = rng.uniform(0.45, 0.75)
    for c in range(3):
        img[c] = sky_top[c] + (sky_bot[c] - sky_top[c]) * (yy / max(horizon, 1e-6))
    ground = rng.uniform(-0.8, 0.3, size=3)
    below = yy >= horizon
    for c in range(3):
        img[c][below] = ground[c] + 0.15 * np.sin(24 * xx[below] + 10 * yy[below])

    # a sun/moon disc and a couple of rectangles for structure
    cx, cy, r = rng.uniform(0.15, 0.85), rng.uniform(0.1, horizon - 0.05), rng.uniform(0.05, 0.12)
    disc = (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
    disc_color = rng.uniform(0.5, 1.0, size=3)
    for c in range(3):
        img[c][disc] = disc_color[c]
    for _ in range(rng.integers(1, 4)):
        x0, y0 = rng.uniform(0.05, 0.7, size=2)
        w, h = rng.uniform(0.08, 0.25, size=2)
        box = (xx >= x0) & (xx <= x0 + w) & (yy >= y0) & (yy <= y0 + h)
        col = rng.uniform(-0.9, 0.9, size=3)
        for c in range(3):
            img[c][box] = 0.7 * col[c] + 0.3 * img[c][box]

    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def main() -> None:
    root = Path(__file__).resolve().parents[1] / "assets"
    corpus = root / "fixture_corpus"
    styles = root / "fixture_styles"
    corpus.mkdir(parents=True, exist_ok=True)
    styles.mkdir(parents=True, exist_ok=True)
    for i in range(16):
        save_image(render_scene(seed=100 + i), corpus / f"scene_{i:02d}.png")
    # style references: heavier palettes and stroke-like banding
    for i in range(6):
        base = render_scene(seed=900 + i)
        rng = np.random.default_rng([i, 77])
        yy, xx = np.meshgrid(np.linspace(0, 1, 96), np.linspace(0, 1, 96), indexing="ij")
        angle = rng.uniform(0, np.pi)
        bands = 0.25 * np.sin(2 * np.pi * 7 * (xx * np.cos(angle) + yy * np.sin(angle)))
        styled = np.clip(base * rng.uniform(0.5, 1.1, size=(3, 1, 1)) + bands, -1, 1)
        save_image(styled, styles / f"style_{i:02d}.png")
    print(f"wrote {len(list(corpus.glob('*.png')))} corpus + {len(list(styles.glob('*.png')))} style images")


if __name__ == "__main__":
    main()
