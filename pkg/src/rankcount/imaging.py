"""Image I/O and bilinear crop-and-resize. Images are float32 [C, H, W] in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _sample_coords(start: float, extent: float, n_out: int, n_in: int):
    # half-pixel centers: output pixel u covers [start + u*step, start + (u+1)*step)
    pos = start + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo).astype(np.float32)
    return lo, hi, frac


def crop_resize(image: np.ndarray, rect: tuple[float, float, float, float], out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample ``rect`` = (x0, y0, w, h) of ``image`` to ``out_hw``."""
    c, h, w = image.shape
    x0, y0, rw, rh = rect
    oh, ow = out_hw
    ylo, yhi, fy = _sample_coords(y0, rh, oh, h)
    xlo, xhi, fx = _sample_coords(x0, rw, ow, w)
    rows_lo = image[:, ylo, :]
    rows_hi = image[:, yhi, :]
    rows = rows_lo + (rows_hi - rows_lo) * fy[None, :, None]
    left = rows[:, :, xlo]
    right = rows[:, :, xhi]
    return (left + (right - left) * fx[None, None, :]).astype(np.float32)
