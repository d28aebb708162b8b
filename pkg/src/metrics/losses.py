from typing import Union

import numpy as np

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor
from src.utils.errors import ShapeError

DEFAULT_SMOOTHING = 1.0


def _as_truth(truth: Union[Tensor, np.ndarray], like: Tensor) -> Tensor:
    data = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if data.shape != like.shape:
        raise ShapeError(f"bi_dice_loss shape mismatch: prediction {like.shape} vs truth {data.shape}")
    if not np.isin(data, (0, 1)).all():
        raise ValueError("bi_dice_loss truth must be binary (values 0 or 1)")
    return Tensor(data, requires_grad=False, dtype=like.dtype)


def _soft_dice(truth: Tensor, prediction: Tensor, eps: float) -> Tensor:
    overlap = F.tensor_sum(truth * prediction, axis=(-2, -1))
    total = F.tensor_sum(truth, axis=(-2, -1)) + F.tensor_sum(prediction, axis=(-2, -1))
    return (overlap * 2.0 + eps) / (total + eps)


def bi_dice_loss(prediction: Tensor, truth: Union[Tensor, np.ndarray], eps: float = DEFAULT_SMOOTHING) -> Tensor:
    """Dice loss on the object plus Dice loss on the background.

    L = 2 - (2*sum(p*q) + eps) / (sum(p) + sum(q) + eps)
          - (2*sum((1-p)(1-q)) + eps) / (sum(1-p) + sum(1-q) + eps)

    with p the binary truth and q the predicted probability, summed over (h, w).
    Accepts (h, w), (c, h, w) or (n, c, h, w); class losses are summed and the
    batch is averaged. Range is [0, 2) per class.
    """
    if eps <= 0:
        raise ValueError(f"bi_dice_loss smoothing must be > 0, got {eps}")
    if prediction.ndim < 2 or prediction.ndim > 4:
        raise ShapeError(f"bi_dice_loss expects 2-D to 4-D predictions, got shape {prediction.shape}")
    if prediction.data.min() < 0 or prediction.data.max() > 1:
        raise ValueError("bi_dice_loss predictions must lie in [0, 1]")

    target = _as_truth(truth, prediction)
    foreground = _soft_dice(target, prediction, eps)
    background = _soft_dice(1.0 - target, 1.0 - prediction, eps)
    per_class = 2.0 - foreground - background

    if prediction.ndim == 4:
        return F.mean(F.tensor_sum(per_class, axis=1))
    if prediction.ndim == 3:
        return F.tensor_sum(per_class)
    return per_class


def bi_dice_per_class(prediction: np.ndarray, truth: np.ndarray, eps: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """Loss values per (image, class) for (n, c, h, w) arrays, without recording gradients."""
    p = np.asarray(truth, dtype=np.float64)
    q = np.asarray(prediction, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"bi_dice_per_class shape mismatch: prediction {q.shape} vs truth {p.shape}")
    axes = (-2, -1)
    foreground = (2 * (p * q).sum(axes) + eps) / (p.sum(axes) + q.sum(axes) + eps)
    background = (2 * ((1 - p) * (1 - q)).sum(axes) + eps) / ((1 - p).sum(axes) + (1 - q).sum(axes) + eps)
    return 2.0 - foreground - background
