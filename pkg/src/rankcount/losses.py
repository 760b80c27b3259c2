"""Counting, pairwise ranking and combined losses as graph operations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .density import DensityMap
from .tensor import ShapeError, Tensor, avg_pool_global, relu, square


@dataclass
class LossValue:
    value: float
    counting: float | None = None
    ranking: float | None = None
    active_pairs: int = 0


def _stack_gt(gt, n: int, hw: tuple[int, int]) -> np.ndarray:
    if isinstance(gt, np.ndarray):
        arr = gt.reshape(gt.shape[0], *gt.shape[-2:]) if gt.ndim in (3, 4) else gt
        if arr.shape[0] != n or arr.shape[1:] != hw:
            raise ShapeError(f"ground truth {gt.shape} does not match predictions [{n},1,{hw[0]},{hw[1]}]")
        return arr
    if len(gt) != n:
        raise ShapeError(f"{len(gt)} ground-truth maps for {n} predictions")
    maps = []
    for i, d in enumerate(gt):
        grid = d.grid if isinstance(d, DensityMap) else np.asarray(d)
        if grid.shape != hw:
            raise ShapeError(f"sample {i}: ground truth {grid.shape} vs prediction {hw}")
        maps.append(grid)
    return np.stack(maps)


def counting_loss(pred: Tensor, gt: Sequence[DensityMap] | np.ndarray) -> Tensor:
    """(1/M) * sum_i sum_cells (y_i - yhat_i)^2 over a batch of M maps."""
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ShapeError(f"predictions must be [M,1,h,w], got {pred.shape}")
    m = pred.shape[0]
    target = _stack_gt(gt, m, pred.shape[2:]).reshape(pred.shape).astype(pred.dtype)
    return square(pred - target).sum() / m


def normalized_counts(pred: Tensor) -> Tensor:
    """Per-image mean density (count per spatial unit), [N,1,h,w] -> [N]."""
    return avg_pool_global(pred).reshape(pred.shape[0])


def ranking_loss(counts: Tensor, pairs: np.ndarray, epsilon: float = 0.0) -> Tensor:
    """sum over (i, j) of max(0, c[j] - c[i] + epsilon).

    Row ``i`` of ``pairs`` is the containing patch, ``j`` the contained one.
    Satisfied pairs (argument <= 0) send no gradient back.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if counts.ndim != 1:
        raise ShapeError(f"counts must be 1-d, got {counts.shape}")
    b = counts.shape[0]
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= b):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= b).any(axis=1)][0]
        raise IndexError(f"pair {tuple(bad)} references a row outside the batch of {b}")
    if not len(pairs):
        return counts.sum() * 0.0
    margin = counts[pairs[:, 1]] - counts[pairs[:, 0]] + epsilon
    return relu(margin).sum()


def active_pairs(counts: np.ndarray, pairs: np.ndarray, epsilon: float = 0.0) -> int:
    pairs = np.asarray(pairs).reshape(-1, 2)
    return int(np.sum(counts[pairs[:, 1]] - counts[pairs[:, 0]] + epsilon > 0))


def multitask_loss(lc: Tensor, lr: Tensor, lam: float) -> Tensor:
    """L = L_c + lambda * L_r."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return lc
    return lc + lr * lam
