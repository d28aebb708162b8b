import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import SegmentationError, ShapeError

logger = logging.getLogger(__name__)

# Per-thread autodiff state: each thread records onto its own tape.
_state = threading.local()

SINGLE = np.float32
WIDE = np.float64


def _local(name: str, default: Any) -> Any:
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def default_dtype() -> type:
    """Dtype given to tensors created from user data on this thread."""
    return _local('dtype', SINGLE)


def is_grad_enabled() -> bool:
    return _local('grad_enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the tape."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def wide_precision() -> Iterator[None]:
    """Create tensors in float64. Used for finite-difference gradient checks."""
    previous = default_dtype()
    _state.dtype = WIDE
    try:
        yield
    finally:
        _state.dtype = previous


class Node:
    """One executed operation: the function object plus its inputs and output."""

    __slots__ = ('fn', 'inputs', 'output')

    def __init__(self, fn: 'Function', inputs: Tuple['Tensor', ...], output: 'Tensor'):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class Tape:
    """Ordered record of executed differentiable operations.

    Nodes are appended in execution order, so every node's inputs were produced
    before it. ``backward`` walks the nodes once in reverse and then resets the tape.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, node: Node):
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def get_tape() -> Tape:
    """Return the tape of the calling thread."""
    return _local('tape', Tape)


class Function:
    """Base class for differentiable operations.

    ``forward`` receives numpy arrays and returns a numpy array; it may stash
    whatever ``backward`` needs on ``self``. ``backward`` receives dL/d(output)
    and returns one gradient (or None) per tensor input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: 'Tensor', **kwargs: Any) -> 'Tensor':
        fn = cls()
        out_data = fn.forward(*(tensor.data for tensor in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(tensor.requires_grad for tensor in tensors)
        out = Tensor._wrap(out_data, requires_grad=requires_grad, is_leaf=False)
        if requires_grad:
            get_tape().record(Node(fn, tensors, out))
        return out


ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """Dense array value with an optional gradient slot.

    Feature maps are 4-D (batch, channels, height, width) in row-major order;
    losses and reductions produce 0-D tensors.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[type] = None):
        array = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self._init(array, requires_grad, is_leaf=True)

    def _init(self, array: np.ndarray, requires_grad: bool, is_leaf: bool):
        if array.ndim > 0 and min(array.shape) < 1:
            raise ShapeError(f"Tensor extents must be >= 1, got shape {array.shape}")
        self.data = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = is_leaf

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool, is_leaf: bool) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor._init(array, requires_grad, is_leaf)
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def zero_grad(self):
        self.grad = None

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data, requires_grad=False, is_leaf=True)

    def backward(self, retain_tape: bool = False):
        backward(self, retain_tape=retain_tape)

    # Operator sugar; the implementations live in functional.py
    def __add__(self, other):
        from src.autodiff import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from src.autodiff import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from src.autodiff import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from src.autodiff import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from src.autodiff import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from src.autodiff import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from src.autodiff import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from src.autodiff import functional as F
        return F.div(other, self)

    def __neg__(self):
        from src.autodiff import functional as F
        return F.neg(self)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> 'Tensor':
        from src.autodiff import functional as F
        return F.tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> 'Tensor':
        from src.autodiff import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _accumulate(store: Dict[int, np.ndarray], key: int, grad: np.ndarray):
    if key in store:
        store[key] = store[key] + grad
    else:
        store[key] = grad


def backward(loss: Tensor, retain_tape: bool = False):
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Gradients from fan-out are summed. The calling thread's tape is reset
    afterwards unless ``retain_tape`` is set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise SegmentationError("backward() called on a tensor that does not require grad")

    tape = get_tape()
    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    pending: Dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        grad_out = pending.pop(id(node.output), None)
        if grad_out is None:
            continue
        input_grads = node.fn.backward(grad_out)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            grad = np.asarray(grad, dtype=tensor.data.dtype)
            if grad.shape != tensor.shape:
                raise ShapeError(
                    f"{type(node.fn).__name__} produced gradient of shape {grad.shape} "
                    f"for input of shape {tensor.shape}"
                )
            if tensor.is_leaf:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            else:
                _accumulate(pending, id(tensor), grad)

    logger.debug(f"Backward visited {len(tape)} recorded operations")
    if not retain_tape:
        tape.reset()
