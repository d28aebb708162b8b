# Array kernels behind the differentiable operators.
#
# conv2d uses a patch-gather (im2col) layout followed by one matrix multiply;
# conv2d_reference is the direct nested-loop convolution kept as a test oracle.
# interpolation_matrix is shared by upsample2x and the data-pipeline resize so both
# follow the same half-pixel convention.

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.utils.errors import ShapeError

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


def _pair(value) -> Pair:
    if isinstance(value, int):
        return (value, value)
    first, second = value
    return (int(first), int(second))


def conv_output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """floor((size + 2p - d(k-1) - 1) / s) + 1"""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)

    def __post_init__(self):
        for name in ('kernel', 'stride', 'padding', 'dilation'):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        for name in ('kernel', 'stride', 'dilation'):
            if min(getattr(self, name)) < 1:
                raise ShapeError(f"ConvSpec {name} extents must be >= 1, got {getattr(self, name)}")
        if min(self.padding) < 0:
            raise ShapeError(f"ConvSpec padding must be >= 0, got {self.padding}")

    @classmethod
    def same(cls, kernel: int = 3, dilation: int = 1) -> 'ConvSpec':
        """Stride-1 spec whose zero padding preserves height and width."""
        pad = dilation * (kernel - 1) // 2
        return cls(kernel=kernel, stride=1, padding=pad, dilation=dilation)

    @property
    def effective_kernel(self) -> Pair:
        return (self.dilation[0] * (self.kernel[0] - 1) + 1,
                self.dilation[1] * (self.kernel[1] - 1) + 1)

    def output_shape(self, height: int, width: int) -> Pair:
        for axis, size, k_eff, pad in (('height', height, self.effective_kernel[0], self.padding[0]),
                                       ('width', width, self.effective_kernel[1], self.padding[1])):
            if k_eff > size + 2 * pad:
                raise ShapeError(
                    f"Effective kernel extent {k_eff} exceeds padded input {axis} {size + 2 * pad}"
                )
        return (conv_output_extent(height, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
                conv_output_extent(width, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]))


def _pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(x: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, int, int]:
    """Gather every receptive patch into a row.

    Returns an (n*out_h*out_w, c*k_h*k_w) matrix plus the output extents.
    Rows are ordered (n, y, x); columns (c, i, j), matching weight.reshape(c_out, -1).
    """
    n, c, h, w = x.shape
    out_h, out_w = spec.output_shape(h, w)
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    eh, ew = spec.effective_kernel

    windows = sliding_window_view(_pad(x, spec), (eh, ew), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw, ::dh, ::dw][:, :, :out_h, :out_w]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    return cols, out_h, out_w


def col2im(cols: np.ndarray, x_shape: Tuple[int, int, int, int], spec: ConvSpec) -> np.ndarray:
    """Scatter-add patch rows back onto the input grid (adjoint of im2col)."""
    n, c, h, w = x_shape
    out_h, out_w = spec.output_shape(h, w)
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    ph, pw = spec.padding

    patches = cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        top = i * dh
        for j in range(kw):
            left = j * dw
            padded[:, :, top:top + sh * (out_h - 1) + 1:sh, left:left + sw * (out_w - 1) + 1:sw] += patches[:, :, i, j]
    return padded[:, :, ph:ph + h, pw:pw + w]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Convolution via im2col + matmul. Returns (output, cols) so backward can reuse the patches."""
    n = x.shape[0]
    c_out = weight.shape[0]
    cols, out_h, out_w = im2col(x, spec)
    out = cols @ weight.reshape(c_out, -1).T
    out += bias
    out = out.reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct convolution, one output pixel and kernel tap at a time."""
    n, c, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    out_h, out_w = spec.output_shape(h, w)
    (sh, sw), (dh, dw) = spec.stride, spec.dilation
    padded = _pad(x, spec)

    out = np.zeros((n, c_out, out_h, out_w), dtype=np.result_type(x, weight))
    for oy in range(out_h):
        for ox in range(out_w):
            acc = np.zeros((n, c_out), dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = padded[:, :, oy * sh + i * dh, ox * sw + j * dw]
                    acc += patch @ weight[:, :, i, j].T
            out[:, :, oy, ox] = acc + bias
    return out


def interpolation_matrix(size_in: int, size_out: int, mode: str) -> np.ndarray:
    """Row r holds the weights that produce output sample r from the input samples.

    Bilinear uses half-pixel centers without corner alignment:
    src = (r + 0.5) * size_in / size_out - 0.5, clamped to the valid range.
    Nearest picks floor(r * size_in / size_out).
    """
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    scale = size_in / size_out
    if mode == 'nearest':
        idx = np.minimum(np.floor(rows * scale).astype(np.int64), size_in - 1)
        matrix[rows, idx] = 1.0
    elif mode == 'bilinear':
        src = np.maximum((rows + 0.5) * scale - 0.5, 0.0)
        lower = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
        upper = np.minimum(lower + 1, size_in - 1)
        frac = src - lower
        np.add.at(matrix, (rows, lower), 1.0 - frac)
        np.add.at(matrix, (rows, upper), frac)
    else:
        raise ValueError(f"Unknown interpolation mode: {mode}")
    return matrix


def resample(x: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Separable resampling over the last two axes."""
    rows = interpolation_matrix(x.shape[-2], out_h, mode).astype(x.dtype, copy=False)
    cols = interpolation_matrix(x.shape[-1], out_w, mode).astype(x.dtype, copy=False)
    return np.ascontiguousarray(rows @ x @ cols.T)
