import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from src.autodiff.kernels import ConvSpec, col2im, conv2d_forward, interpolation_matrix
from src.autodiff.tensor import Function, Tensor
from src.utils.errors import ShapeError

logger = logging.getLogger(__name__)

Operand = Union[Tensor, float, int, np.ndarray]
Axes = Optional[Union[int, Tuple[int, ...]]]


def _lift(value: Operand, like: Tensor) -> Tensor:
    """Wrap a constant so it can take part in a binary op with ``like``."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), requires_grad=False, dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes that broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_4d(x: np.ndarray, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (n, c, h, w) tensor, got {x.ndim}-D shape {x.shape}")


# ---------------------------------------------------------------------------
# Elementwise family
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(sorted(a % len(self.shape) for a in axes))
            for axis in axes:
                grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        # Strictly inside (0, 1) at the working precision
        out = expit(x).astype(x.dtype, copy=False)
        dt = out.dtype
        self.out = np.clip(out, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


def add(a: Operand, b: Operand) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Add.apply(_lift(a, like), _lift(b, like))


def sub(a: Operand, b: Operand) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Sub.apply(_lift(a, like), _lift(b, like))


def mul(a: Operand, b: Operand) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Mul.apply(_lift(a, like), _lift(b, like))


def div(a: Operand, b: Operand) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    return Div.apply(_lift(a, like), _lift(b, like))


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def tensor_sum(x: Tensor, axis: Axes = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Axes = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


# ---------------------------------------------------------------------------
# Convolution, pooling, resampling, channel plumbing
# ---------------------------------------------------------------------------

class Conv2d(Function):
    def forward(self, x, weight, bias, spec: ConvSpec):
        _require_4d(x, 'conv2d')
        if weight.ndim != 4:
            raise ShapeError(f"conv2d weight must be 4-D (c_out, c_in, k_h, k_w), got shape {weight.shape}")
        if weight.shape[1] != x.shape[1]:
            raise ShapeError(
                f"conv2d channel axis mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
            )
        if weight.shape[2:] != spec.kernel:
            raise ShapeError(f"conv2d kernel axes mismatch: weight {weight.shape[2:]} vs spec {spec.kernel}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d bias axis mismatch: expected ({weight.shape[0]},), got {bias.shape}")
        self.spec = spec
        self.x_shape = x.shape
        self.weight = weight
        out, self.cols = conv2d_forward(x, weight, bias, spec)
        return out

    def backward(self, grad):
        c_out = self.weight.shape[0]
        grad_mat = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_weight = (grad_mat.T @ self.cols).reshape(self.weight.shape)
        grad_bias = grad_mat.sum(axis=0)
        grad_cols = grad_mat @ self.weight.reshape(c_out, -1)
        grad_x = col2im(grad_cols, self.x_shape, self.spec)
        return grad_x, grad_weight, grad_bias


class MaxPool2d(Function):
    """2x2 window, stride 2. Ties go to the first position in row-major window order."""

    def forward(self, x):
        _require_4d(x, 'maxpool2d')
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            axis = 'height' if h % 2 else 'width'
            raise ShapeError(f"maxpool2d needs even extents, got odd {axis} in shape {x.shape}")
        self.x_shape = x.shape
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(windows, self.argmax[..., None], grad[..., None], axis=-1)
        grad_x = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad_x,)


class Upsample2x(Function):
    def forward(self, x, mode='bilinear'):
        _require_4d(x, 'upsample2x')
        h, w = x.shape[2:]
        self.mode = mode
        if mode == 'nearest':
            return x.repeat(2, axis=2).repeat(2, axis=3)
        self.rows = interpolation_matrix(h, 2 * h, mode).astype(x.dtype)
        self.cols = interpolation_matrix(w, 2 * w, mode).astype(x.dtype)
        return np.ascontiguousarray(self.rows @ x @ self.cols.T)

    def backward(self, grad):
        if self.mode == 'nearest':
            n, c, h2, w2 = grad.shape
            return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)
        return (np.ascontiguousarray(self.rows.T @ grad @ self.cols),)


class Concat(Function):
    def forward(self, *parts):
        self.splits = np.cumsum([part.shape[1] for part in parts])[:-1]
        return np.concatenate(parts, axis=1)

    def backward(self, grad):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(grad, self.splits, axis=1))


class SliceChannels(Function):
    def forward(self, x, start=0, stop=None):
        self.x_shape = x.shape
        self.start, self.stop = start, stop if stop is not None else x.shape[1]
        return x[:, self.start:self.stop].copy()

    def backward(self, grad):
        grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
        grad_x[:, self.start:self.stop] = grad
        return (grad_x,)


class BatchNorm2d(Function):
    """Per-channel normalization over (n, h, w) with learned scale and shift.

    Running statistics are numpy buffers owned by the layer and updated in place
    during training-mode forwards.
    """

    def forward(self, x, scale, shift, running_mean=None, running_var=None,
                training=True, momentum=0.1, eps=1e-5):
        _require_4d(x, 'batchnorm2d')
        n, c, h, w = x.shape
        count = n * h * w
        self.training = training
        if training:
            if count < 2:
                raise ShapeError(
                    f"batchnorm2d in training mode needs n*h*w >= 2 values per channel, got shape {x.shape}"
                )
            batch_mean = x.mean(axis=(0, 2, 3))
            batch_var = x.var(axis=(0, 2, 3))
            if running_mean is not None:
                running_mean *= (1 - momentum)
                running_mean += momentum * batch_mean
                running_var *= (1 - momentum)
                running_var += momentum * batch_var * count / (count - 1)
            stat_mean, stat_var = batch_mean, batch_var
        else:
            stat_mean, stat_var = running_mean.astype(x.dtype), running_var.astype(x.dtype)

        self.count = count
        self.inv_std = (1.0 / np.sqrt(stat_var + eps)).astype(x.dtype)
        self.xhat = (x - stat_mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.scale = scale
        return self.xhat * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        grad_scale = (grad * self.xhat).sum(axis=axes)
        grad_shift = grad.sum(axis=axes)
        grad_xhat = grad * self.scale[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if self.training:
            m = self.count
            grad_x = inv_std / m * (
                m * grad_xhat
                - grad_xhat.sum(axis=axes, keepdims=True)
                - self.xhat * (grad_xhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_xhat * inv_std
        return grad_x, grad_scale, grad_shift


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, spec: Optional[ConvSpec] = None) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation."""
    spec = spec or ConvSpec(kernel=weight.shape[2:])
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0]), requires_grad=False, dtype=weight.dtype)
    return Conv2d.apply(x, weight, bias, spec=spec)


def maxpool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def upsample2x(x: Tensor, mode: str = 'bilinear') -> Tensor:
    if mode not in ('nearest', 'bilinear'):
        raise ValueError(f"upsample2x mode must be 'nearest' or 'bilinear', got {mode!r}")
    return Upsample2x.apply(x, mode=mode)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in argument order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    reference = parts[0].shape
    for index, part in enumerate(parts):
        _require_4d(part.data, 'concat_channels')
        for axis, name in ((0, 'batch'), (2, 'height'), (3, 'width')):
            if part.shape[axis] != reference[axis]:
                raise ShapeError(
                    f"concat_channels {name} axis mismatch: part {index} has {part.shape[axis]}, "
                    f"part 0 has {reference[axis]}"
                )
    if len(parts) == 1:
        return parts[0]
    return Concat.apply(*parts)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(x, start=start, stop=stop)


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor,
                running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    if not training and (running_mean is None or running_var is None):
        raise ShapeError("batchnorm2d in inference mode needs running statistics")
    return BatchNorm2d.apply(x, scale, shift, running_mean=running_mean, running_var=running_var,
                             training=training, momentum=momentum, eps=eps)


def split_channels(x: Tensor, widths: List[int]) -> List[Tensor]:
    """Slice consecutive channel groups; the inverse of concat_channels."""
    pieces, start = [], 0
    for width in widths:
        pieces.append(slice_channels(x, start, start + width))
        start += width
    return pieces
