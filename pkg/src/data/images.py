import os
from typing import Optional, Tuple

import numpy as np

from src.autodiff.kernels import resample
from src.data.netpbm import read_netpbm, write_netpbm
from src.utils.errors import DataError

IMAGE_SUFFIXES = ('.pgm', '.ppm', '.png')
MASK_THRESHOLD = 128


def _decode_png(path: str) -> Tuple[np.ndarray, int]:
    try:
        import png
    except ImportError:
        raise DataError(f"Cannot decode {path}: PNG support needs the pypng package")
    try:
        width, height, rows, info = png.Reader(filename=path).asDirect()
        planes = info['planes']
        pixels = np.vstack([np.asarray(row, dtype=np.uint16) for row in rows]).reshape(height, width, planes)
    except (png.Error, OSError) as e:
        raise DataError(f"Cannot decode {path}: {e}")
    if info.get('alpha'):
        pixels = pixels[..., :-1]
    maxval = (1 << info['bitdepth']) - 1
    if pixels.shape[2] == 1:
        pixels = pixels[..., 0]
    dtype = np.uint8 if maxval < 256 else np.uint16
    return pixels.astype(dtype), maxval


def decode_file(path: str) -> Tuple[np.ndarray, int]:
    """Raw samples and maxval of a NetPBM or PNG file."""
    suffix = os.path.splitext(path)[1].lower()
    if suffix == '.png':
        return _decode_png(path)
    if suffix in ('.pgm', '.ppm', '.pnm'):
        return read_netpbm(path)
    raise DataError(f"Unsupported image format: {path}")


def to_unit(pixels: np.ndarray, maxval: int) -> np.ndarray:
    """Scale samples to [0, 1] float32, channel axis first: (c, h, w)."""
    scaled = np.asarray(pixels, dtype=np.float32) / np.float32(maxval)
    if scaled.ndim == 2:
        return scaled[None]
    return np.ascontiguousarray(np.moveaxis(scaled, -1, 0))


def binarize(mask: np.ndarray, maxval: Optional[int] = None, threshold: int = MASK_THRESHOLD) -> np.ndarray:
    """Foreground where the sample, rescaled to the 8-bit range, is >= threshold.

    Without an explicit maxval, arrays holding only 0/1 are taken as already
    binary (maxval 1) and anything else as 8-bit, so binarize is idempotent.
    """
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask.max(axis=-1)
    if maxval is None:
        maxval = 1 if int(mask.max(initial=0)) <= 1 else 255
    if maxval != 255:
        mask = np.asarray(mask, dtype=np.float64) * (255.0 / maxval)
    return (mask >= threshold).astype(np.uint8)


def load_image(path: str) -> np.ndarray:
    pixels, maxval = decode_file(path)
    return to_unit(pixels, maxval)


def load_mask(path: str) -> np.ndarray:
    pixels, maxval = decode_file(path)
    return binarize(pixels, maxval)


def resize(array: np.ndarray, height: int, width: int, mode: str = 'bilinear') -> np.ndarray:
    """Resize the trailing (h, w) axes.

    Images use bilinear sampling and masks nearest, with the same sampling
    grid as upsample2x. An identity target returns the input unchanged.
    """
    if height < 1 or width < 1:
        raise ValueError(f"resize target must be >= 1, got {height}x{width}")
    array = np.asarray(array)
    if array.shape[-2:] == (height, width):
        return array
    lead = array.shape[:-2]
    flat = array.reshape((1, -1) + array.shape[-2:])
    if mode == 'nearest':
        # Index selection keeps labels exact in any dtype
        out = resample(flat.astype(np.float64), height, width, 'nearest').astype(array.dtype)
    else:
        out = resample(flat.astype(np.float32), height, width, 'bilinear')
    return out.reshape(lead + (height, width))


def write_gray(path: str, unit: np.ndarray):
    """Write a [0, 1] (h, w) array as an 8-bit PGM."""
    write_netpbm(path, np.clip(np.rint(np.asarray(unit) * 255), 0, 255).astype(np.uint8))


def write_mask(path: str, mask: np.ndarray):
    write_netpbm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
