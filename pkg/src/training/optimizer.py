import logging
from typing import Dict, Iterable, Tuple

import numpy as np

from src.autodiff.tensor import Tensor
from src.training.config import TrainConfig
from src.utils.errors import CheckpointError, NumericError

logger = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over named parameters.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)

    Parameters without a gradient are stepped with a zero gradient.
    """

    def __init__(self, named_parameters: Iterable[Tuple[str, Tensor]], cfg: TrainConfig):
        self.params: Dict[str, Tensor] = dict(named_parameters)
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps_adam
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def _gradients(self) -> Dict[str, np.ndarray]:
        grads = {}
        for name, param in self.params.items():
            grad = param.grad if param.grad is not None else np.zeros_like(param.data)
            if grad.shape != param.shape:
                raise NumericError(f"Gradient shape {grad.shape} does not match parameter '{name}' {param.shape}")
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"Non-finite gradient for parameter '{name}'")
            grads[name] = grad
        return grads

    def step(self):
        grads = self._gradients()
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for name, param in self.params.items():
            g = grads[name].astype(param.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            param.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype, copy=False)

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def state_dict(self) -> Dict:
        return {
            'step': self.step_count,
            'm': {name: array.copy() for name, array in self.m.items()},
            'v': {name: array.copy() for name, array in self.v.items()},
        }

    def load_state_dict(self, state: Dict):
        for key in ('m', 'v'):
            names = set(state[key])
            if names != set(self.params):
                raise CheckpointError(f"Adam state '{key}' does not cover the model parameters")
            for name, array in state[key].items():
                if np.shape(array) != self.params[name].shape:
                    raise CheckpointError(f"Adam state '{key}' for '{name}' has shape {np.shape(array)}")
        self.step_count = int(state['step'])
        self.m = {name: np.array(state['m'][name], dtype=p.dtype) for name, p in self.params.items()}
        self.v = {name: np.array(state['v'][name], dtype=p.dtype) for name, p in self.params.items()}
        logger.debug(f"Restored Adam state at step {self.step_count}")
