"""PNG emission for inspection: clamped grayscale with landmark crosses."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

CROSS_COLOUR = (255, 40, 40)


def overlay_rgb(image: np.ndarray, landmarks: np.ndarray | None = None) -> np.ndarray:
    """8-bit RGB view of ``image`` clamped to [0, 1], with a 3-px cross per landmark.

    Landmarks are 1-based ``(row, col)``; crosses are clipped at the border.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(np.round(img * 255).astype(np.uint8)[..., None], 3, axis=-1)
    if landmarks is not None:
        h, w = img.shape
        for r, c in np.rint(np.asarray(landmarks)).astype(int) - 1:
            for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    rgb[rr, cc] = CROSS_COLOUR
    return rgb


def save_overlay(path: str | Path, image: np.ndarray, landmarks: np.ndarray | None = None) -> Path:
    path = Path(path)
    Image.fromarray(overlay_rgb(image, landmarks), mode="RGB").save(path)
    return path
