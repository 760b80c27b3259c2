"""Point annotations, ground-truth density maps and counts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

TRUNCATE = 4.0  # Gaussian support, in standard deviations


class AnnotationError(ValueError):
    pass


@dataclass
class PointAnnotation:
    image_id: str
    points: np.ndarray  # [N, 2] (x, y) pixel coordinates
    width: int
    height: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise AnnotationError(
                    f"{self.image_id}: point {tuple(pts[i])} outside {self.width}x{self.height} image"
                )

    @property
    def count(self) -> int:
        return len(self.points)

    def to_record(self) -> dict:
        return {
            "image-id": self.image_id,
            "width": self.width,
            "height": self.height,
            "points": self.points.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PointAnnotation":
        return cls(rec["image-id"], np.asarray(rec["points"], dtype=np.float64), int(rec["width"]), int(rec["height"]))


@dataclass
class DensityMap:
    grid: np.ndarray  # [h, w]
    scale: tuple[float, float] = field(default=(1.0, 1.0))  # source px per cell (x, y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def load_annotations(path: str | Path) -> list[PointAnnotation]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(PointAnnotation.from_record(json.loads(line)))
    return out


def save_annotations(path: str | Path, anns: Iterable[PointAnnotation]) -> None:
    with open(path, "w") as fh:
        for ann in anns:
            fh.write(json.dumps(ann.to_record()) + "\n")


def _axis_weights(coord: float, cell: float, n: int, sigma: float) -> tuple[int, np.ndarray]:
    """1-D Gaussian values at the cell centers within the truncated support."""
    lo = max(0, int(np.floor((coord - TRUNCATE * sigma) / cell)))
    hi = min(n - 1, int(np.floor((coord + TRUNCATE * sigma) / cell)))
    if hi < lo:
        return lo, np.zeros(0)
    centers = (np.arange(lo, hi + 1) + 0.5) * cell
    d = centers - coord
    vals = np.exp(-0.5 * (d / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma) * cell
    vals[np.abs(d) > TRUNCATE * sigma] = 0.0
    return lo, vals


def render_density(
    ann: PointAnnotation,
    sigma: float = 15.0,
    out_size: tuple[int, int] | None = None,
    normalize: bool = False,
) -> DensityMap:
    """Place an isotropic Gaussian (std ``sigma`` source px) at every point.

    The map is rendered directly at ``out_size`` = (h, w) cells: each cell
    holds the continuous density at its center times the cell area. Kernels
    are cut at 4 sigma and at the image border. With ``normalize`` each
    point's kernel is rescaled to unit mass over the in-bounds cells, so the
    map sums to the point count exactly.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = out_size if out_size is not None else (ann.height, ann.width)
    if h < 1 or w < 1:
        raise ValueError(f"out_size must be at least 1x1, got {(h, w)}")
    cx, cy = ann.width / w, ann.height / h
    grid = np.zeros((h, w), dtype=np.float64)
    for x, y in ann.points:
        x0, wx = _axis_weights(x, cx, w, sigma)
        y0, wy = _axis_weights(y, cy, h, sigma)
        kernel = np.outer(wy, wx)
        mass = kernel.sum()
        if normalize:
            if mass <= 0:
                # kernel narrower than a cell: deposit in the containing cell
                grid[min(int(y / cy), h - 1), min(int(x / cx), w - 1)] += 1.0
                continue
            kernel = kernel / mass
        grid[y0 : y0 + len(wy), x0 : x0 + len(wx)] += kernel
    return DensityMap(grid, (cx, cy))


def count_from_density(d: DensityMap | np.ndarray) -> float:
    grid = d.grid if isinstance(d, DensityMap) else np.asarray(d)
    return float(grid.sum(dtype=np.float64))


def crop_annotation(ann: PointAnnotation, rect: tuple[float, float, float, float]) -> PointAnnotation:
    """Keep the points strictly inside ``rect`` = (x0, y0, width, height), rebased.

    Points on the image's own top/left edge (coordinate 0) are kept when the
    rect starts at the edge, so a whole-image rect is the identity.
    """
    x0, y0, rw, rh = rect
    if rw <= 0 or rh <= 0:
        raise ValueError(f"degenerate rect {rect}")
    if x0 < 0 or y0 < 0 or x0 + rw > ann.width + 1e-9 or y0 + rh > ann.height + 1e-9:
        raise ValueError(f"rect {rect} outside {ann.width}x{ann.height} image")
    p = ann.points
    inside = (p[:, 0] < x0 + rw) & (p[:, 1] < y0 + rh)
    inside &= (p[:, 0] > x0) | ((x0 == 0) & (p[:, 0] == 0))
    inside &= (p[:, 1] > y0) | ((y0 == 0) & (p[:, 1] == 0))
    kept = p[inside] - np.array([x0, y0])
    width = int(np.ceil(rw))
    height = int(np.ceil(rh))
    # guard against rounding pushing a rebased point onto the far edge
    kept = np.minimum(kept, np.nextafter(np.array([width, height], dtype=np.float64), 0))
    return PointAnnotation(ann.image_id, kept, width, height)


def save_pgm(path: str | Path, arr: np.ndarray) -> None:
    """8-bit PGM, max-normalized (an all-zero map stays black)."""
    a = np.asarray(arr, dtype=np.float64)
    peak = a.max() if a.size else 0.0
    img = np.zeros(a.shape, dtype=np.uint8) if peak <= 0 else np.clip(np.round(255 * a / peak), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")
