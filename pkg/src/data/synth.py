# Synthetic ultrasound-like segmentation data.
#
# Each sample is a dark background with one or two bright ellipses; the mask
# is the ellipse interior. With speckle enabled the image is multiplied by a
# Rayleigh-distributed factor with unit mean. Sample i is drawn from
# default_rng([seed, i]) so any subset can be regenerated on its own.
#
# Layout written:
#   <out>/images/<id>.pgm (or .ppm for color)
#   <out>/masks/<id>.pgm  (or <id>.c0.pgm, <id>.c1.pgm for two classes)
#   <out>/ellipses.csv

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.data.dataset import SampleSet, default_workers, load_dataset
from src.data.netpbm import write_netpbm
from src.utils.errors import ConfigValidationError
from src.utils.logger import setup_logger

BACKGROUND_LEVEL = 0.2
OBJECT_LEVELS = (0.75, 0.5)
# Per-channel tint for color output
COLOR_TINT = (1.0, 0.8, 0.65)
RAYLEIGH_UNIT_MEAN_SCALE = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    label: int = 0

    def half_extents(self) -> Tuple[float, float]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return (math.sqrt((self.ry * c) ** 2 + (self.rx * s) ** 2),
                math.sqrt((self.ry * s) ** 2 + (self.rx * c) ** 2))


def ellipse_mask(ellipse: Ellipse, height: int, width: int) -> np.ndarray:
    """Pixels whose centers lie inside the ellipse (boundary included)."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = y - ellipse.cy, x - ellipse.cx
    c, s = math.cos(ellipse.angle), math.sin(ellipse.angle)
    u = (dy * c + dx * s) / ellipse.ry
    v = (-dy * s + dx * c) / ellipse.rx
    return (u * u + v * v <= 1.0).astype(np.uint8)


def draw_ellipses(rng: np.random.Generator, height: int, width: int, count: int) -> List[Ellipse]:
    """Random ellipses fully inside the image.

    One ellipse: semi-axes in [h/10, h/3] (and w likewise); two: [h/10, h/5].
    """
    upper = 3.0 if count == 1 else 5.0
    ellipses = []
    for label in range(count):
        ry = rng.uniform(height / 10.0, height / upper)
        rx = rng.uniform(width / 10.0, width / upper)
        angle = rng.uniform(0.0, math.pi)
        shape = Ellipse(0.0, 0.0, ry, rx, angle)
        ey, ex = shape.half_extents()
        cy = rng.uniform(ey, height - 1 - ey)
        cx = rng.uniform(ex, width - 1 - ex)
        ellipses.append(Ellipse(cy, cx, ry, rx, angle, label))
    return ellipses


class SyntheticGenerator:
    def __init__(self, out_dir: str, height: int, width: Optional[int] = None, seed: int = 0,
                 speckle: bool = True, n_classes: int = 1, channels: int = 1, workers: Optional[int] = None):
        width = height if width is None else width
        for name, value in (('height', height), ('width', width)):
            if value < 8 or value % 8:
                raise ConfigValidationError(f"Synthetic {name} must be a positive multiple of 8, got {value}")
        if seed < 0:
            raise ConfigValidationError(f"seed must be >= 0, got {seed}")
        if n_classes not in (1, 2):
            raise ConfigValidationError(f"n_classes must be 1 or 2, got {n_classes}")
        if channels not in (1, 3):
            raise ConfigValidationError(f"channels must be 1 or 3, got {channels}")

        self.out_dir = out_dir
        self.height = height
        self.width = width
        self.seed = seed
        self.speckle = speckle
        self.n_classes = n_classes
        self.channels = channels
        self.workers = workers or default_workers()
        self.logger = setup_logger('SyntheticGenerator')

    def sample_id(self, index: int, total: int) -> str:
        return f"{index:0{max(5, len(str(total - 1)))}d}"

    def render(self, index: int) -> Tuple[np.ndarray, np.ndarray, List[Ellipse]]:
        """8-bit image (h, w) or (h, w, 3), binary masks (classes, h, w) and the ellipses."""
        rng = np.random.default_rng([self.seed, index])
        count = 2 if self.n_classes == 2 else int(rng.integers(1, 3))
        ellipses = draw_ellipses(rng, self.height, self.width, count)

        image = np.full((self.height, self.width), BACKGROUND_LEVEL, dtype=np.float64)
        interiors = [ellipse_mask(e, self.height, self.width) for e in ellipses]
        for e, interior in zip(ellipses, interiors):
            level = OBJECT_LEVELS[e.label] if self.n_classes == 2 else OBJECT_LEVELS[0]
            image[interior == 1] = level
        if self.speckle:
            image = image * rng.rayleigh(RAYLEIGH_UNIT_MEAN_SCALE, size=image.shape)

        if self.n_classes == 2:
            masks = np.stack(interiors)
        else:
            masks = np.maximum.reduce(interiors)[None]

        if self.channels == 3:
            image = image[..., None] * np.asarray(COLOR_TINT)
        pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
        return pixels, masks, ellipses

    def _write(self, job: Tuple[int, int]) -> List[dict]:
        index, total = job
        sample_id = self.sample_id(index, total)
        pixels, masks, ellipses = self.render(index)
        suffix = '.pgm' if self.channels == 1 else '.ppm'
        write_netpbm(os.path.join(self.out_dir, 'images', sample_id + suffix), pixels)
        if self.n_classes == 1:
            write_netpbm(os.path.join(self.out_dir, 'masks', sample_id + '.pgm'), masks[0] * 255)
        else:
            for k in range(self.n_classes):
                write_netpbm(os.path.join(self.out_dir, 'masks', f'{sample_id}.c{k}.pgm'), masks[k] * 255)
        return [{'id': sample_id, 'ellipse': i, **asdict(e)} for i, e in enumerate(ellipses)]

    def generate(self, n_samples: int) -> pd.DataFrame:
        if n_samples < 1:
            raise ConfigValidationError(f"n_samples must be >= 1, got {n_samples}")
        os.makedirs(os.path.join(self.out_dir, 'images'), exist_ok=True)
        os.makedirs(os.path.join(self.out_dir, 'masks'), exist_ok=True)

        jobs = [(index, n_samples) for index in range(n_samples)]
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            rows = [row for batch in executor.map(self._write, jobs) for row in batch]

        ellipses = pd.DataFrame(rows, columns=['id', 'ellipse', 'cy', 'cx', 'ry', 'rx', 'angle', 'label'])
        ellipses.to_csv(os.path.join(self.out_dir, 'ellipses.csv'), index=False, float_format='%.17g')
        self.logger.info(f"Wrote {n_samples} synthetic samples ({self.height}x{self.width}, "
                         f"speckle={'on' if self.speckle else 'off'}) to {self.out_dir}")
        return ellipses


def synth_dataset(out_dir: str, n_samples: int, height: int, width: Optional[int] = None, seed: int = 0,
                  speckle: bool = True, n_classes: int = 1, channels: int = 1,
                  workers: Optional[int] = None) -> SampleSet:
    """Generate a dataset on disk and return it loaded."""
    generator = SyntheticGenerator(out_dir, height, width, seed, speckle, n_classes, channels, workers)
    generator.generate(n_samples)
    return load_dataset(out_dir, workers)


def read_ellipses(root: str) -> pd.DataFrame:
    return pd.read_csv(os.path.join(root, 'ellipses.csv'), dtype={'id': str})


def masks_from_ellipses(frame: pd.DataFrame, sample_id: str, height: int, width: int, n_classes: int = 1) -> np.ndarray:
    """Re-derive (classes, h, w) masks from the ground-truth table."""
    rows = frame[frame['id'] == sample_id]
    masks = np.zeros((n_classes, height, width), dtype=np.uint8)
    for row in rows.itertuples(index=False):
        ellipse = Ellipse(row.cy, row.cx, row.ry, row.rx, row.angle, int(row.label))
        k = ellipse.label if n_classes == 2 else 0
        masks[k] = np.maximum(masks[k], ellipse_mask(ellipse, height, width))
    return masks
