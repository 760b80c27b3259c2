"""Count prediction, MAE/MSE reports and the cross-dataset transfer protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import PointAnnotation
from .model import CountingNet, NetConfig, forward, load_checkpoint
from .tensor import ShapeError


def mae_mse(true: Sequence[float], pred: Sequence[float]) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error ("MSE" by the usual crowd-counting naming)."""
    t = np.asarray(true, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape or t.size == 0:
        raise ValueError(f"need equal, non-empty count vectors, got {t.shape} and {p.shape}")
    err = t - p
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def _padded_forward(net: CountingNet, image: np.ndarray) -> tuple[np.ndarray, int, int]:
    stride = net.output_stride
    _, h, w = image.shape
    if h < stride or w < stride:
        raise ShapeError(f"image {w}x{h} is smaller than the network stride {stride}")
    ph, pw = (-h) % stride, (-w) % stride
    x = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect") if (ph or pw) else image
    dmap = forward(net, x[None]).data[0, 0].astype(np.float64)
    return dmap, h, w


def _coverage(n_cells: int, extent: int, stride: int) -> np.ndarray:
    """Fraction of each output cell that lies inside the unpadded image."""
    lo = np.arange(n_cells) * stride
    return np.clip((extent - lo) / stride, 0.0, 1.0)


def predict_density(net: CountingNet, image: np.ndarray) -> np.ndarray:
    """Density map over the padded image, with padded area weighted out."""
    dmap, h, w = _padded_forward(net, image)
    s = net.output_stride
    return dmap * np.outer(_coverage(dmap.shape[0], h, s), _coverage(dmap.shape[1], w, s))


def predict_count(net: CountingNet, image: np.ndarray) -> float:
    """Full-image inference: sum of the predicted density map.

    Images are reflect-padded on the bottom/right to the next stride
    multiple; cells are weighted by the fraction of their footprint inside
    the original image, so the pad contributes nothing.
    """
    return float(predict_density(net, image).sum())


def predict_count_tiled(net: CountingNet, image: np.ndarray, tile: int) -> float:
    _, h, w = image.shape
    total = 0.0
    for y in range(0, h, tile):
        for x in range(0, w, tile):
            total += predict_count(net, image[:, y : y + tile, x : x + tile])
    return total


@dataclass
class EvalReport:
    image_ids: list[str]
    true: list[float]
    pred: list[float]
    mae: float
    mse: float
    dataset_id: str = ""
    checkpoint: str = ""
    cross_dataset: bool = False
    label: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, image_ids, true, pred, **kw) -> "EvalReport":
        mae, mse = mae_mse(true, pred)
        return cls(list(image_ids), [float(v) for v in true], [float(v) for v in pred], mae, mse, **kw)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "true", "pred", "abs_err"])
            for i, t, p in zip(self.image_ids, self.true, self.pred):
                w.writerow([i, repr(t), repr(p), repr(abs(t - p))])
            w.writerow(["MAE", repr(self.mae)])
            w.writerow(["MSE", repr(self.mse)])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def read_json(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(
    net: CountingNet,
    dataset: Sequence[tuple[np.ndarray, PointAnnotation | None]],
    dataset_id: str = "",
    ids: Sequence[str] | None = None,
) -> EvalReport:
    """Predict every image in ``dataset`` and compare with its annotated count."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    missing = [ids[i] if ids else str(i) for i, (_, ann) in enumerate(dataset) if ann is None]
    if missing:
        raise ValueError(f"images without annotations: {', '.join(missing)}")
    names, true, pred = [], [], []
    for image, ann in dataset:
        names.append(ann.image_id)
        true.append(ann.count)
        pred.append(predict_count(net, image))
    return EvalReport.build(names, true, pred, dataset_id=dataset_id, checkpoint=net.fingerprint())


def transfer_eval(
    source,
    target: Sequence[tuple[np.ndarray, PointAnnotation | None]],
    target_id: str = "",
    expect: NetConfig | None = None,
) -> EvalReport:
    """Evaluate a net trained elsewhere on ``target`` without any adaptation.

    ``source`` is a CountingNet or a checkpoint path; ``expect`` guards the
    checkpoint's architecture.
    """
    if isinstance(source, CountingNet):
        net = source
        if expect is not None and net.config != expect:
            raise ValueError(f"architecture {net.config} does not match expected {expect}")
    else:
        net, _ = load_checkpoint(source, expect)
    report = evaluate(net, target, target_id)
    report.cross_dataset = True
    return report


def kfold_splits(n: int, folds: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded (train_idx, test_idx) splits; test folds partition range(n)."""
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    return [(np.sort(np.concatenate(parts[:i] + parts[i + 1 :])), np.sort(parts[i])) for i in range(folds)]


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
