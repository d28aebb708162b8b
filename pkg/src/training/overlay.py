import os
from typing import List, Optional

import numpy as np
from scipy.ndimage import binary_erosion

from src.data.dataset import SampleSet
from src.data.netpbm import write_netpbm
from src.nn.layers import Layer
from src.training.evaluation import predict_set

PREDICTED_COLOR = (0, 0, 255)
TRUTH_COLOR = (0, 255, 0)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a background 4-neighbour (mask XOR its erosion); outside counts as background."""
    mask = np.asarray(mask).astype(bool)
    return mask ^ binary_erosion(mask, border_value=0)


def render_overlay(image: np.ndarray, predicted: np.ndarray, truth: Optional[np.ndarray] = None) -> np.ndarray:
    """RGB uint8 (h, w, 3) of a (c, h, w) [0, 1] image with boundaries recolored.

    ``predicted`` and ``truth`` are (classes, h, w); predicted boundaries are
    drawn last so they win where both coincide.
    """
    image = np.asarray(image)
    base = image[0] if image.shape[0] == 1 else None
    rgb = np.repeat(base[..., None], 3, axis=-1) if base is not None else np.moveaxis(image[:3], 0, -1)
    rgb = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    if truth is not None:
        for mask in truth:
            rgb[boundary(mask)] = TRUTH_COLOR
    for mask in predicted:
        rgb[boundary(mask)] = PREDICTED_COLOR
    return rgb


def write_overlays(model: Layer, samples: SampleSet, out_dir: str, threshold: float = 0.5,
                   include_truth: bool = True) -> List[str]:
    """One ``<id>.ppm`` per sample; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    predictions = predict_set(model, samples, threshold)
    paths = []
    for sample in samples:
        rgb = render_overlay(sample.image, predictions[sample.id], sample.masks if include_truth else None)
        path = os.path.join(out_dir, f'{sample.id}.ppm')
        write_netpbm(path, rgb)
        paths.append(path)
    return paths
