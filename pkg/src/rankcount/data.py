"""Synthetic scenes, corpora on disk, the multi-scale patch sampler and minibatches."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import DensityMap, PointAnnotation, crop_annotation, load_annotations, render_density, save_annotations
from .imaging import crop_resize, load_image, save_image
from .rankgen import RankedChain, enumerate_pairs, materialize

MIN_PATCH = 56
MAX_PATCH = 448


# -- synthetic scenes --------------------------------------------------------
@dataclass
class SceneParams:
    height: int = 192
    width: int = 192
    density: float = 50.0  # expected number of persons (Poisson mean)
    perspective: float = 0.0  # 0: uniform rows; >0: denser, smaller people towards the top
    blob_radius: tuple[float, float] = (3.0, 9.0)
    clutter: float = 0.5
    channels: int = 3
    exact: bool = False  # place round(density) persons instead of a Poisson draw


@dataclass
class SyntheticScene:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    annotation: PointAnnotation
    params: SceneParams


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.standard_normal((1, h // cell + 2, w // cell + 2)).astype(np.float32)
    return crop_resize(coarse, (0.5, 0.5, coarse.shape[2] - 1, coarse.shape[1] - 1), (h, w))[0]


def generate_scene(params: SceneParams, rng: np.random.Generator, image_id: str = "scene") -> SyntheticScene:
    """Scatter person blobs over a textured background.

    Each person is a zero-mean difference-of-Gaussians splat (dark head, light
    rim) so the mean image intensity carries no count information.
    """
    if not 0 <= params.density <= 5000:
        raise ValueError(f"density must be in [0, 5000], got {params.density}")
    h, w, c = params.height, params.width, params.channels
    if params.exact:
        n = int(round(params.density))
    else:
        n = int(rng.poisson(params.density)) if params.density > 0 else 0

    # rows: linear density 1 + g*(1 - y/h), sampled by rejection
    ys = np.empty(0)
    g = params.perspective
    while len(ys) < n:
        cand = rng.uniform(0, h, size=2 * (n - len(ys)) + 8)
        keep = rng.uniform(0, 1 + g, size=cand.size) < 1 + g * (1 - cand / h)
        ys = np.concatenate([ys, cand[keep]])
    ys = ys[:n]
    xs = rng.uniform(0, w, size=n)
    rmin, rmax = params.blob_radius
    if g > 0:
        radius = rmin + (rmax - rmin) * (ys / h) * rng.uniform(0.8, 1.0, size=n)
    else:
        radius = rng.uniform(rmin, rmax, size=n)
    amplitude = rng.uniform(0.35, 0.6, size=n)
    tint = rng.uniform(0.7, 1.0, size=(n, c))

    base = 0.5 + 0.08 * _smooth_noise(rng, h, w, 24)
    texture = params.clutter * 0.06 * _smooth_noise(rng, h, w, 3)
    image = np.repeat((base + texture)[None], c, axis=0)
    image += 0.03 * _smooth_noise(rng, h, w, 32)[None] * rng.uniform(-1, 1, size=(c, 1, 1)).astype(np.float32)

    yy, xx = np.arange(h)[:, None] + 0.5, np.arange(w)[None, :] + 0.5
    for x, y, rad, a, t in zip(xs, ys, radius, amplitude, tint):
        reach = int(np.ceil(3 * rad))
        y0, y1 = max(0, int(y) - reach), min(h, int(y) + reach + 1)
        x0, x1 = max(0, int(x) - reach), min(w, int(x) + reach + 1)
        d2 = (yy[y0:y1] - y) ** 2 + (xx[:, x0:x1] - x) ** 2
        inner = (rad / 2) ** 2
        splat = np.exp(-d2 / (2 * inner)) - 0.25 * np.exp(-d2 / (2 * rad**2))
        image[:, y0:y1, x0:x1] -= (a * splat)[None] * t[:, None, None]
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    points = np.stack([xs, ys], axis=1) if n else np.zeros((0, 2))
    return SyntheticScene(image, PointAnnotation(image_id, points, w, h), params)


# -- corpora on disk ---------------------------------------------------------
ANNOTATIONS = "annotations.jsonl"


def save_corpus(directory: str | Path, scenes: Sequence[tuple[np.ndarray, PointAnnotation]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image, ann in scenes:
        save_image(directory / f"{ann.image_id}.png", image)
    save_annotations(directory / ANNOTATIONS, [ann for _, ann in scenes])


def load_corpus(directory: str | Path, require_annotations: bool = True) -> list[tuple[np.ndarray, PointAnnotation | None]]:
    """(image, annotation) pairs from DIR/<image-id>.png and DIR/annotations.jsonl."""
    directory = Path(directory)
    ann_path = directory / ANNOTATIONS
    if ann_path.exists():
        anns = load_annotations(ann_path)
        out = []
        for ann in anns:
            image = load_image(_image_path(directory, ann.image_id))
            if image.shape[1:] != (ann.height, ann.width):
                raise ValueError(f"{ann.image_id}: image is {image.shape[2]}x{image.shape[1]}, annotation says {ann.width}x{ann.height}")
            out.append((image, ann))
        return out
    if require_annotations:
        raise FileNotFoundError(f"no {ANNOTATIONS} in {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm", ".jpg", ".jpeg"))
    return [(load_image(p), None) for p in paths]


def image_ids(directory: str | Path) -> list[str]:
    directory = Path(directory)
    return sorted(p.stem for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm", ".jpg", ".jpeg"))


def _image_path(directory: Path, image_id: str) -> Path:
    for ext in (".png", ".pgm", ".jpg", ".jpeg"):
        p = directory / f"{image_id}{ext}"
        if p.exists():
            return p
    return directory / f"{image_id}.png"


def load_image_by_id(directory: str | Path, image_id: str) -> np.ndarray:
    return load_image(_image_path(Path(directory), image_id))


# -- labeled patches ---------------------------------------------------------
@dataclass
class LabeledPatch:
    image: np.ndarray  # [C, in, in]
    gt: DensityMap
    rect: tuple[float, float, float, float]  # source-pixel (x0, y0, w, h)
    count: int


@dataclass(frozen=True)
class PatchConfig:
    input_size: int = 48
    output_stride: int = 8
    sigma: float = 15.0
    min_side: int = MIN_PATCH
    max_side: int = MAX_PATCH
    scales: tuple[float, ...] = (1.0,)
    side_dist: str = "uniform"  # or "loguniform"

    @property
    def out_cells(self) -> int:
        return self.input_size // self.output_stride


def draw_side(lo: int, hi: int, rng: np.random.Generator, dist: str = "uniform") -> int:
    if dist == "uniform":
        return int(rng.integers(lo, hi + 1))
    if dist == "loguniform":
        return int(min(hi, max(lo, np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1)))))))
    raise ValueError(f"unknown side distribution {dist!r}")


def sample_labeled_patch(image: np.ndarray, ann: PointAnnotation, rng: np.random.Generator, cfg: PatchConfig = PatchConfig()) -> LabeledPatch:
    """One random square patch and its exact-count ground truth.

    The image is (virtually) rescaled by a factor drawn from ``cfg.scales``;
    a side is drawn from [min_side, min(max_side, shorter rescaled side)] and
    a placement uniformly among the valid integer offsets. Ground truth is
    rendered from the points inside the patch at the network output
    resolution with per-point normalization, so it sums to the point count.
    """
    h, w = image.shape[1:]
    f = float(cfg.scales[int(rng.integers(len(cfg.scales)))]) if len(cfg.scales) > 1 else float(cfg.scales[0])
    sh, sw = int(np.floor(h * f)), int(np.floor(w * f))
    if min(sh, sw) < cfg.min_side:
        raise ValueError(f"scene {w}x{h} at scale {f} is smaller than the {cfg.min_side} px minimum patch")
    side = draw_side(cfg.min_side, min(cfg.max_side, sh, sw), rng, cfg.side_dist)
    px = int(rng.integers(0, sw - side + 1))
    py = int(rng.integers(0, sh - side + 1))
    rect = (px / f, py / f, side / f, side / f)
    patch = crop_resize(image, rect, (cfg.input_size, cfg.input_size))
    sub = crop_annotation(ann, rect)
    cells = cfg.out_cells
    gt = render_density(sub, cfg.sigma / f, (cells, cells), normalize=True)
    return LabeledPatch(patch, gt, rect, sub.count)


# -- minibatches -------------------------------------------------------------
@dataclass
class Sources:
    labeled: list[tuple[np.ndarray, PointAnnotation]] = field(default_factory=list)
    chains: list[RankedChain] = field(default_factory=list)
    unlabeled: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class BatchConfig:
    patch: PatchConfig = PatchConfig()
    counting_size: int = 25
    chains_per_batch: int = 5
    k: int = 5
    seed: int = 0


@dataclass
class Minibatch:
    kind: str
    images: np.ndarray  # [B, C, in, in]
    gt: np.ndarray | None = None  # [n_counting, h, w]
    pairs: np.ndarray | None = None  # [P, 2] row indices into images
    n_counting: int = 0
    counts: list[int] | None = None  # true counts of the counting rows


def _cycled(n: int, start: int, size: int, seed: int, stream: int) -> list[int]:
    """Items ``start .. start+size`` of a sequence of per-epoch permutations of range(n)."""
    out = []
    for pos in range(start, start + size):
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
        out.append(int(perm[offset]))
    return out


def batch_rngs(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent per-batch streams for the counting and ranking partitions."""
    return np.random.default_rng([seed, index, 0]), np.random.default_rng([seed, index, 1])


def _counting_part(sources: Sources, cfg: BatchConfig, index: int, rng: np.random.Generator):
    n = len(sources.labeled)
    if n == 0:
        raise ValueError(f"counting batch needs labeled scenes: required >= 1, available {n}")
    picks = _cycled(n, index * cfg.counting_size, cfg.counting_size, cfg.seed, 0)
    patches = [sample_labeled_patch(*sources.labeled[i], rng, cfg.patch) for i in picks]
    images = np.stack([p.image for p in patches])
    gt = np.stack([p.gt.grid for p in patches]).astype(np.float32)
    return images, gt, [p.count for p in patches]


def _ranking_part(sources: Sources, cfg: BatchConfig, index: int):
    n = len(sources.chains)
    if n < cfg.chains_per_batch:
        raise ValueError(f"ranking batch needs {cfg.chains_per_batch} chains, available {n}")
    picks = _cycled(n, index * cfg.chains_per_batch, cfg.chains_per_batch, cfg.seed, 1)
    chains = [sources.chains[i] for i in picks]
    for c in chains:
        if c.k != cfg.k:
            raise ValueError(f"chain for {c.image_id} has k={c.k}, config expects k={cfg.k}")
        if c.image_id not in sources.unlabeled:
            raise KeyError(f"no unlabeled image {c.image_id!r} for chain")
    images = np.concatenate([materialize(c, sources.unlabeled[c.image_id], cfg.patch.input_size) for c in chains])
    return images, chains


def assemble_batch(kind: str, sources: Sources, cfg: BatchConfig, index: int) -> Minibatch:
    """Build minibatch ``index`` of the given kind; a pure function of its arguments.

    counting: ``counting_size`` labeled patches, one per labeled scene per epoch.
    ranking:  ``chains_per_batch`` chains of k patches with all in-chain pairs.
    mixed:    counting rows first, then ranking rows; pair indices are offset
              past the counting partition.
    """
    crng, _ = batch_rngs(cfg.seed, index)
    if kind == "counting":
        images, gt, counts = _counting_part(sources, cfg, index, crng)
        return Minibatch("counting", images, gt=gt, n_counting=len(images), counts=counts)
    if kind == "ranking":
        images, chains = _ranking_part(sources, cfg, index)
        return Minibatch("ranking", images, pairs=enumerate_pairs(chains))
    if kind == "mixed":
        cimages, gt, counts = _counting_part(sources, cfg, index, crng)
        rimages, chains = _ranking_part(sources, cfg, index)
        pairs = enumerate_pairs(chains, offset=len(cimages))
        return Minibatch("mixed", np.concatenate([cimages, rimages]), gt=gt, pairs=pairs, n_counting=len(cimages), counts=counts)
    raise ValueError(f"unknown batch kind {kind!r}")
