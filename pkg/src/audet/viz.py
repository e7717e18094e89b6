"""Attention and prior-map overlays rendered to PNG."""

from __future__ import annotations

import numpy as np
from PIL import Image


def _ramp(values: np.ndarray) -> np.ndarray:
    """Blue-to-red heat ramp over values normalized to [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.6 * v - 0.2, 0.0, 1.0)
    g = np.clip(1.0 - np.abs(2.0 * v - 1.0) * 1.2, 0.0, 1.0)
    b = np.clip(1.2 - 1.6 * v, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay_heat(image: np.ndarray, grid: np.ndarray, alpha: float = 0.45) -> Image.Image:
    """Blend a (G, G) map, upsampled bilinearly, over a (3, H, W) image."""
    h, w = image.shape[-2:]
    norm = grid / grid.max() if grid.max() > 0 else grid
    heat_img = Image.fromarray((norm * 255.0).astype(np.uint8), "L")
    heat = np.asarray(heat_img.resize((w, h), Image.BILINEAR), dtype=np.float64) / 255.0
    base = np.clip(image.transpose(1, 2, 0), 0.0, 1.0)
    blended = (1.0 - alpha) * base + alpha * _ramp(heat)
    return Image.fromarray((blended * 255.0 + 0.5).astype(np.uint8), "RGB")


def save_attention_overlays(image: np.ndarray, avg_grid: np.ndarray,
                            channel_grids: dict, out_prefix: str) -> list:
    """Write the average-attention overlay plus selected channel overlays.

    ``channel_grids`` maps a channel index to its (G, G) attention map.
    Returns the written paths.
    """
    paths = []
    path = f"{out_prefix}_avg.png"
    overlay_heat(image, avg_grid).save(path)
    paths.append(path)
    for idx, grid in channel_grids.items():
        path = f"{out_prefix}_ch{idx}.png"
        overlay_heat(image, grid).save(path)
        paths.append(path)
    return paths
