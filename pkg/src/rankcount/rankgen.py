"""Ranked chains of nested square patches drawn from unlabeled images.

A chain shares one anchor (center). The first square is the largest one
centered on the anchor that fits in the image; each following square is
the previous side times ``s``, floored to whole pixels. Any person inside
a square is inside every larger square of the chain, so true counts never
increase along the chain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imaging import crop_resize, load_image

MIN_SIDE = 32


class ChainInfeasible(ValueError):
    pass


@dataclass
class RankedChain:
    image_id: str
    anchor: tuple[float, float]
    sides: list[int]
    seed: int | None = None
    image_size: tuple[int, int] | None = None  # (W, H)

    @property
    def k(self) -> int:
        return len(self.sides)

    @property
    def rects(self) -> list[tuple[float, float, float, float]]:
        """(x0, y0, side, side) per rank index, largest first."""
        ax, ay = self.anchor
        return [(ax - s / 2, ay - s / 2, float(s), float(s)) for s in self.sides]

    def to_record(self) -> dict:
        rec = {"image-id": self.image_id, "anchor": list(self.anchor), "sides": list(self.sides), "seed": self.seed}
        if self.image_size is not None:
            rec["image-size"] = list(self.image_size)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RankedChain":
        size = rec.get("image-size")
        return cls(
            rec["image-id"],
            tuple(float(v) for v in rec["anchor"]),
            [int(v) for v in rec["sides"]],
            rec.get("seed"),
            tuple(size) if size else None,
        )


def anchor_region(width: int, height: int, r: float, mode: str = "area") -> tuple[float, float, float, float]:
    """Centered (x0, y0, w, h) region with the image's aspect ratio.

    ``mode="area"`` gives 1/r of the image area; ``mode="side"`` shrinks each
    side by 1/r.
    """
    if r < 1:
        raise ValueError(f"anchor region parameter r must be >= 1, got {r}")
    if mode == "area":
        f = 1.0 / math.sqrt(r)
    elif mode == "side":
        f = 1.0 / r
    else:
        raise ValueError(f"unknown anchor mode {mode!r}")
    rw, rh = width * f, height * f
    return ((width - rw) / 2, (height - rh) / 2, rw, rh)


def chain_sides(first: int, k: int, s: float) -> list[int]:
    sides = [int(first)]
    for _ in range(k - 1):
        sides.append(int(math.floor(sides[-1] * s)))
    return sides


def _largest_side(ax: float, ay: float, width: int, height: int) -> int:
    return int(math.floor(2 * min(ax, width - ax, ay, height - ay)))


def generate_chain(
    image_size: tuple[int, int],
    k: int,
    s: float,
    r: float,
    rng: np.random.Generator,
    *,
    anchor_mode: str = "area",
    anchor: tuple[float, float] | None = None,
    min_side: int = MIN_SIDE,
    image_id: str = "",
    seed: int | None = None,
) -> RankedChain:
    """Draw one chain for an image of ``image_size`` = (W, H).

    Raises ChainInfeasible when some anchor in the region would leave the
    smallest square under ``min_side`` px, so feasibility does not depend on
    the draw.
    """
    if not 0 < s < 1:
        raise ValueError(f"scale factor s must be in (0, 1), got {s}")
    if k < 2:
        raise ValueError(f"a chain needs k >= 2 patches, got {k}")
    width, height = image_size
    x0, y0, rw, rh = anchor_region(width, height, r, anchor_mode)
    worst = chain_sides(_largest_side(x0, y0, width, height), k, s)[-1]
    if worst < min_side:
        raise ChainInfeasible(
            f"{width}x{height} image too small for k={k}, s={s}, r={r}: "
            f"smallest patch can be {worst} px < {min_side} px"
        )
    if anchor is None:
        anchor = (x0 + rng.uniform() * rw, y0 + rng.uniform() * rh)
    ax, ay = float(anchor[0]), float(anchor[1])
    sides = chain_sides(_largest_side(ax, ay, width, height), k, s)
    if sides[-1] < min_side:
        raise ChainInfeasible(f"anchor {anchor} leaves smallest patch at {sides[-1]} px")
    chain = RankedChain(image_id, (ax, ay), sides, seed, (width, height))
    validate_chain(chain, width, height, s)
    return chain


def validate_chain(chain: RankedChain, width: int, height: int, s: float | None = None) -> None:
    if chain.k < 2:
        raise ValueError(f"{chain.image_id}: chain has {chain.k} patches")
    eps = 1e-9
    prev = None
    for j, (x0, y0, side, _) in enumerate(chain.rects):
        if x0 < -eps or y0 < -eps or x0 + side > width + eps or y0 + side > height + eps:
            raise ValueError(f"{chain.image_id}: patch {j} {(x0, y0, side)} leaves the image")
        if prev is not None:
            px0, py0, pside, _ = prev
            if not (x0 >= px0 - eps and y0 >= py0 - eps and x0 + side <= px0 + pside + eps and side < pside):
                raise ValueError(f"{chain.image_id}: patch {j} not strictly inside patch {j - 1}")
            if s is not None and abs(side - pside * s) >= 1.0:
                raise ValueError(f"{chain.image_id}: side ratio off by more than flooring at patch {j}")
        prev = (x0, y0, side, side)


def enumerate_pairs(chain_lengths: Iterable[int | RankedChain], offset: int = 0) -> np.ndarray:
    """All (containing, contained) row pairs within each chain of a batch.

    Chains occupy consecutive rows starting at ``offset``; a chain of length
    k contributes k*(k-1)/2 pairs and no pair crosses chains.
    """
    pairs = []
    base = offset
    for c in chain_lengths:
        k = c.k if isinstance(c, RankedChain) else int(c)
        for i in range(k):
            for j in range(i + 1, k):
                pairs.append((base + i, base + j))
        base += k
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def materialize(chain: RankedChain, image: np.ndarray | str | Path, input_size: int) -> np.ndarray:
    """Crop every patch of the chain and resize it to input_size x input_size -> [k, C, in, in]."""
    if not isinstance(image, np.ndarray):
        image = load_image(image)
    return np.stack([crop_resize(image, rect, (input_size, input_size)) for rect in chain.rects])


def load_chains(path: str | Path) -> list[RankedChain]:
    with open(path) as fh:
        return [RankedChain.from_record(json.loads(line)) for line in fh if line.strip()]


def save_chains(path: str | Path, chains: Sequence[RankedChain]) -> None:
    with open(path, "w") as fh:
        for c in chains:
            fh.write(json.dumps(c.to_record()) + "\n")
