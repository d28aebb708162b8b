import logging

import numpy as np

from src.nn.layers import Layer

logger = logging.getLogger(__name__)


def kaiming_init(layer: Layer, seed: int):
    """He-normal initialization, deterministic given ``seed``.

    Conv weights ~ N(0, 2 / (k*k*c_in)), biases 0, norm scale 1 and shift 0.
    Parameters are visited in definition order; norm running statistics are reset.
    """
    rng = np.random.default_rng(seed)
    for name, tensor in layer.named_parameters():
        leaf = name.rsplit('.', 1)[-1]
        if leaf == 'weight' and tensor.ndim == 4:
            fan_in = int(np.prod(tensor.shape[1:]))
            values = rng.standard_normal(tensor.shape) * np.sqrt(2.0 / fan_in)
            tensor.data = values.astype(tensor.dtype)
        elif leaf in ('bias', 'shift'):
            tensor.data = np.zeros(tensor.shape, dtype=tensor.dtype)
        elif leaf == 'scale':
            tensor.data = np.ones(tensor.shape, dtype=tensor.dtype)
        else:
            logger.debug(f"Leaving parameter {name} untouched")
    for name, buffer in layer.named_buffers():
        buffer[...] = 1.0 if name.endswith('running_var') else 0.0
