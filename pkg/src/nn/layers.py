import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from src.autodiff import functional as F
from src.autodiff.kernels import ConvSpec
from src.autodiff.tensor import Tensor, default_dtype, no_grad
from src.utils.errors import ConfigValidationError, ShapeError, UnsupportedOperationError

logger = logging.getLogger(__name__)


class Layer:
    """A node of the model tree: named parameters, buffers and ordered children.

    Iteration order is definition order, so parameter names and the order of
    the checkpoint blob are deterministic.
    """

    def __init__(self):
        self._parameters: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, 'Layer'] = {}
        self.training = True
        self.frozen = False

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._parameters or name in self._children:
            raise ConfigValidationError(f"Duplicate parameter name '{name}' in {type(self).__name__}")
        tensor.requires_grad = True
        self._parameters[name] = tensor
        return tensor

    def register_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._buffers:
            raise ConfigValidationError(f"Duplicate buffer name '{name}' in {type(self).__name__}")
        self._buffers[name] = array
        return array

    def add_child(self, name: str, layer: 'Layer') -> 'Layer':
        if name in self._children or name in self._parameters:
            raise ConfigValidationError(f"Duplicate child name '{name}' in {type(self).__name__}")
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._parameters.items():
            yield prefix + name, tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> Iterator[Tensor]:
        for _, tensor in self.named_parameters():
            yield tensor

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in self._buffers.items():
            yield prefix + name, array
        for child_name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def named_layers(self, prefix: str = '') -> Iterator[Tuple[str, 'Layer']]:
        yield prefix.rstrip('.'), self
        for child_name, child in self._children.items():
            yield from child.named_layers(f"{prefix}{child_name}.")

    def children(self) -> Iterator[Tuple[str, 'Layer']]:
        return iter(self._children.items())

    def train(self, mode: bool = True) -> 'Layer':
        if mode and self.frozen:
            raise ConfigValidationError("A frozen layer cannot return to training mode")
        for _, layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self) -> 'Layer':
        return self.train(False)

    def freeze(self) -> 'Layer':
        """Switch to inference mode and stop recording gradients for parameters.

        A frozen layer holds no mutable state during forward and can be shared
        across threads.
        """
        self.eval()
        for _, layer in self.named_layers():
            layer.frozen = True
        for tensor in self.parameters():
            tensor.requires_grad = False
            tensor.grad = None
        return self

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: tensor.data.copy() for name, tensor in self.named_parameters()}
        state.update({name: array.copy() for name, array in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [name for name in list(expected) + list(buffers) if name not in state]
        unexpected = [name for name in state if name not in expected and name not in buffers]
        if missing or unexpected:
            raise ShapeError(f"State mismatch - missing: {missing}, unexpected: {unexpected}")
        for name, tensor in expected.items():
            array = np.asarray(state[name])
            if array.shape != tensor.shape:
                raise ShapeError(f"Shape mismatch for '{name}': expected {tensor.shape}, got {array.shape}")
            tensor.data = np.array(array, dtype=tensor.dtype, copy=True)
        for name, buffer in buffers.items():
            array = np.asarray(state[name])
            if array.shape != buffer.shape:
                raise ShapeError(f"Shape mismatch for '{name}': expected {buffer.shape}, got {array.shape}")
            buffer[...] = array

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        if self.frozen:
            with no_grad():
                return self.forward(x)
        return self.forward(x)

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        """Map an incoming receptive extent to the extents carried by this layer's output.

        ``jump`` is the cumulative stride in input pixels. Returns (extents, jump).
        """
        raise UnsupportedOperationError(f"No receptive-field rule for {type(self).__name__}")


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, dilation: int = 1):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ConfigValidationError(f"Conv2d channels must be >= 1, got {in_channels}->{out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spec = ConvSpec.same(kernel_size, dilation)
        dtype = default_dtype()
        self.weight = self.register_parameter(
            'weight', Tensor(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), dtype=dtype)
        )
        self.bias = self.register_parameter('bias', Tensor(np.zeros(out_channels), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.spec)

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        k = self.spec.kernel[0]
        d = self.spec.dilation[0]
        return (extent + (k - 1) * d * jump,), jump * self.spec.stride[0]


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = default_dtype()
        self.momentum = momentum
        self.eps = eps
        self.scale = self.register_parameter('scale', Tensor(np.ones(channels), dtype=dtype))
        self.shift = self.register_parameter('shift', Tensor(np.zeros(channels), dtype=dtype))
        self.running_mean = self.register_buffer('running_mean', np.zeros(channels, dtype=dtype))
        self.running_var = self.register_buffer('running_var', np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        return (extent,), jump


class ConvNormAct(Layer):
    """3x3 convolution with same padding, optional batch norm, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int = 1, use_norm: bool = True):
        super().__init__()
        self.conv = self.add_child('conv', Conv2d(in_channels, out_channels, 3, dilation))
        self.norm: Optional[BatchNorm2d] = None
        if use_norm:
            self.norm = self.add_child('norm', BatchNorm2d(out_channels))

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return F.relu(x)

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        return self.conv.trace_receptive_field(extent, jump)
