from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from src.utils.errors import ShapeError


def dice_score(truth: np.ndarray, predicted: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|) for binary masks; two empty masks score 1."""
    truth = np.asarray(truth).astype(bool)
    predicted = np.asarray(predicted).astype(bool)
    if truth.shape != predicted.shape:
        raise ShapeError(f"dice_score shape mismatch: truth {truth.shape} vs predicted {predicted.shape}")
    total = int(truth.sum()) + int(predicted.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(truth, predicted).sum()) / total


def dice_per_class(truth: np.ndarray, predicted: np.ndarray) -> List[float]:
    """Dice for each class plane of (classes, h, w) masks."""
    truth = np.asarray(truth)
    predicted = np.asarray(predicted)
    if truth.shape != predicted.shape:
        raise ShapeError(f"dice_per_class shape mismatch: truth {truth.shape} vs predicted {predicted.shape}")
    return [dice_score(truth[k], predicted[k]) for k in range(truth.shape[0])]


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.6f} ± {self.std:.6f}"


def summarize(values: Sequence[float]) -> Summary:
    """Arithmetic mean and sample standard deviation (n-1 denominator, 0 for one value)."""
    array = np.asarray(list(values), dtype=np.float64)
    if array.size == 0:
        raise ValueError("summarize needs at least one value")
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return Summary(float(array.mean()), std, int(array.size))
