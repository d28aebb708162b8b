# Analytic receptive fields and the impulse-response oracle that checks them.
#
# Along a stride-1 path every k x k convolution with dilation d grows the
# extent by (k - 1) * d * jump, jump being the cumulative stride. A
# concatenation carries the set of its incoming extents.

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor, get_tape
from src.nn.layers import Layer
from src.utils.errors import ShapeError, UnsupportedOperationError


@dataclass(frozen=True)
class ReceptiveField:
    branches: Tuple[int, ...]
    jump: int = 1

    def __post_init__(self):
        for extent in self.branches:
            if extent < 1 or extent % 2 == 0:
                raise ShapeError(f"Receptive extents must be odd and >= 1, got {self.branches}")

    @property
    def extents(self) -> frozenset:
        return frozenset(self.branches)

    @property
    def largest(self) -> int:
        return max(self.branches)


@dataclass(frozen=True)
class OperationField:
    """Receptive field of one encoder/decoder operation inside a model."""
    name: str
    level: int
    local: ReceptiveField
    absolute: Optional[int]


def receptive_field(layer: Layer, extent: int = 1, jump: int = 1):
    """Analytic receptive field of a block, or a per-operation report for a model.

    Models expose ``operation_fields()``; anything else must implement
    ``trace_receptive_field``.
    """
    if hasattr(layer, 'operation_fields'):
        return layer.operation_fields()
    extents, jump = layer.trace_receptive_field(extent, jump)
    return ReceptiveField(tuple(extents), jump)


def _footprint(grad: np.ndarray) -> int:
    plane = np.abs(grad).sum(axis=(0, 1))
    rows = np.nonzero(plane.sum(axis=1))[0]
    cols = np.nonzero(plane.sum(axis=0))[0]
    if rows.size == 0:
        return 0
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))


def measure_receptive_field(layer: Layer, in_channels: int, size: int) -> Tuple[int, ...]:
    """Measure each branch's extent from the gradient footprint of one centered output pixel.

    Weights are temporarily made non-negative with zero bias and norm layers
    run in inference mode, so no ReLU blocks the path; the original state is
    restored afterwards. ``size`` should be at least twice the largest extent.
    """
    if getattr(layer, 'frozen', False):
        raise UnsupportedOperationError("Cannot measure a frozen layer; measure an unfrozen copy")

    saved_state = layer.state_dict()
    was_training = layer.training
    try:
        for name, tensor in layer.named_parameters():
            if name.endswith('bias') or name.endswith('shift'):
                tensor.data = np.zeros_like(tensor.data)
            else:
                tensor.data = np.abs(tensor.data) + 1e-3
        layer.eval()

        dtype = next(layer.parameters()).dtype
        center = size // 2
        widths: List[int] = list(getattr(layer, 'branch_widths', ()))

        extents = []
        start = 0
        impulse_mask = np.zeros((1, 1, size, size))
        impulse_mask[0, 0, center, center] = 1.0
        for width in widths or [None]:
            x = Tensor(np.ones((1, in_channels, size, size)), requires_grad=True, dtype=dtype)
            out = layer(x)
            stop = out.shape[1] if width is None else start + width
            selected = F.slice_channels(out, start, stop)
            loss = F.tensor_sum(F.mul(selected, Tensor(impulse_mask, dtype=dtype)))
            loss.backward()
            extents.append(_footprint(x.grad))
            start = stop
            layer.zero_grad()
        return tuple(extents)
    finally:
        get_tape().reset()
        layer.load_state_dict(saved_state)
        layer.train(was_training)
