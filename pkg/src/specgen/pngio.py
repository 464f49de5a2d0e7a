"""Grayscale PNG reading/writing and the fixed RGB export colormap.

Images travel through the pipeline as float arrays in [0, 1]; PNG files are
8-bit. ``save_gray``/``load_gray`` round-trip through round(v * 255). The RGB
export form applies a fixed viridis colormap at save time only; everything
upstream of file export is single-channel.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_gray(image: np.ndarray, path) -> None:
    """Write a [0,1] float matrix as an 8-bit grayscale PNG."""
    Image.fromarray(to_uint8(image), mode="L").save(Path(path), format="PNG")


def save_rgb(image: np.ndarray, path) -> None:
    """Write a [0,1] float matrix as a colormapped 8-bit RGB PNG."""
    from matplotlib import colormaps

    rgba = colormaps["viridis"](np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0))
    rgb = np.clip(np.round(rgba[..., :3] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG")


def load_gray(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back to a float matrix in [0, 1]."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0
