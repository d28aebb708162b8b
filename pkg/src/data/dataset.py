import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from src.data.images import IMAGE_SUFFIXES, load_image, load_mask, resize
from src.utils.errors import DataError, ShapeError
from src.utils.logger import setup_logger

MASK_SUFFIXES = ('.pgm', '.png')
_CLASS_STEM = re.compile(r'^(?P<id>.+)\.c(?P<k>\d+)$')


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray            # (channels, h, w) float32 in [0, 1]
    masks: np.ndarray            # (classes, h, w) uint8 in {0, 1}
    image_path: Optional[str] = None
    mask_paths: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.image.ndim != 3 or self.masks.ndim != 3:
            raise ShapeError(f"Sample {self.id}: image and masks must be (c, h, w), "
                             f"got {self.image.shape} and {self.masks.shape}")
        if self.image.shape[1:] != self.masks.shape[1:]:
            raise ShapeError(f"Sample {self.id}: image extents {self.image.shape[1:]} "
                             f"differ from mask extents {self.masks.shape[1:]}")

    @property
    def extent(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass(frozen=True)
class SampleSet:
    """Image/mask pairs ordered lexicographically by id. Immutable once built."""
    samples: Tuple[Sample, ...]
    channels: int = field(init=False)
    n_classes: int = field(init=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.samples, key=lambda s: s.id))
        if not ordered:
            raise DataError("A sample set needs at least one sample")
        ids = [s.id for s in ordered]
        duplicates = sorted(i for i, count in Counter(ids).items() if count > 1)
        if duplicates:
            raise DataError(f"Duplicate sample ids: {', '.join(duplicates)}")
        channels = {s.image.shape[0] for s in ordered}
        classes = {s.masks.shape[0] for s in ordered}
        if len(channels) > 1:
            raise DataError(f"Mixed channel counts in sample set: {sorted(channels)}")
        if len(classes) > 1:
            raise DataError(f"Mixed class counts in sample set: {sorted(classes)}")
        object.__setattr__(self, 'samples', ordered)
        object.__setattr__(self, 'channels', channels.pop())
        object.__setattr__(self, 'n_classes', classes.pop())

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    @property
    def extent(self) -> Tuple[int, int]:
        extents = {s.extent for s in self.samples}
        if len(extents) > 1:
            raise ShapeError(f"Samples have mixed extents {sorted(extents)}; resize them to one extent first")
        return extents.pop()

    def subset(self, ids: Iterable[str]) -> 'SampleSet':
        wanted = set(ids)
        missing = wanted - set(self.ids)
        if missing:
            raise DataError(f"Unknown sample ids: {', '.join(sorted(missing))}")
        return SampleSet(tuple(s for s in self.samples if s.id in wanted))

    def resized(self, height: int, width: int) -> 'SampleSet':
        return SampleSet(tuple(
            Sample(s.id, resize(s.image, height, width, 'bilinear'), resize(s.masks, height, width, 'nearest'),
                   s.image_path, s.mask_paths)
            for s in self.samples
        ))

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Stacked (n, channels, h, w) images."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.image for s in chosen])

    def masks(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Stacked (n, classes, h, w) masks."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.masks for s in chosen])


def default_workers() -> int:
    return max(1, min(8, psutil.cpu_count(logical=False) or 1))


class DatasetLoader:
    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or default_workers()
        self.logger = setup_logger('DatasetLoader')

    def _index_images(self, images_dir: str) -> Dict[str, str]:
        found = {}
        for name in sorted(os.listdir(images_dir)):
            stem, suffix = os.path.splitext(name)
            if suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if stem in found:
                raise DataError(f"Two images share the stem '{stem}' in {images_dir}")
            found[stem] = os.path.join(images_dir, name)
        return found

    def _index_masks(self, masks_dir: str) -> Dict[str, Dict[int, str]]:
        found: Dict[str, Dict[int, str]] = {}
        for name in sorted(os.listdir(masks_dir)):
            stem, suffix = os.path.splitext(name)
            if suffix.lower() not in MASK_SUFFIXES:
                continue
            match = _CLASS_STEM.match(stem)
            sample_id, k = (match.group('id'), int(match.group('k'))) if match else (stem, 0)
            per_class = found.setdefault(sample_id, {})
            if k in per_class:
                raise DataError(f"Duplicate mask for '{sample_id}' class {k} in {masks_dir}")
            per_class[k] = os.path.join(masks_dir, name)
        return found

    def _decode(self, job: Tuple[str, str, List[str]]) -> Sample:
        sample_id, image_path, mask_paths = job
        image = load_image(image_path)
        masks = np.stack([load_mask(path) for path in mask_paths])
        return Sample(sample_id, image, masks, image_path, tuple(mask_paths))

    def load_folder(self, images_dir: str, masks_dir: str) -> SampleSet:
        for path in (images_dir, masks_dir):
            if not os.path.isdir(path):
                self.logger.error(f"Dataset directory not found: {path}")
                raise DataError(f"Dataset directory not found: {path}")

        images = self._index_images(images_dir)
        masks = self._index_masks(masks_dir)
        if not images:
            raise DataError(f"No images found in {images_dir}")

        jobs = []
        for sample_id, image_path in sorted(images.items()):
            per_class = masks.get(sample_id)
            if not per_class:
                self.logger.error(f"Image '{sample_id}' has no mask in {masks_dir}")
                raise DataError(f"Image '{sample_id}' has no matching mask in {masks_dir}")
            classes = sorted(per_class)
            if classes != list(range(len(classes))):
                raise DataError(f"Mask classes for '{sample_id}' are not contiguous from 0: {classes}")
            jobs.append((sample_id, image_path, [per_class[k] for k in classes]))

        orphans = sorted(set(masks) - set(images))
        if orphans:
            self.logger.warning(f"Ignoring {len(orphans)} masks without images: {', '.join(orphans[:5])}")

        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            samples = list(executor.map(self._decode, jobs))

        sample_set = SampleSet(tuple(samples))
        self.logger.info(f"Loaded {len(sample_set)} samples from {images_dir} "
                         f"({sample_set.channels} channel(s), {sample_set.n_classes} class(es))")
        return sample_set


def load_folder(images_dir: str, masks_dir: str, workers: Optional[int] = None) -> SampleSet:
    return DatasetLoader(workers).load_folder(images_dir, masks_dir)


def load_dataset(root: str, workers: Optional[int] = None) -> SampleSet:
    """Load the ``<root>/images`` + ``<root>/masks`` layout."""
    return load_folder(os.path.join(root, 'images'), os.path.join(root, 'masks'), workers)
