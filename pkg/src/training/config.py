from dataclasses import dataclass
from typing import Any, Mapping

from src.utils.config import coerce_fields
from src.utils.errors import ConfigValidationError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 4
    epochs: int = 500
    # Used instead of ``epochs`` once the training set exceeds large_set_threshold samples
    epochs_large: int = 85
    large_set_threshold: int = 2000
    seed: int = 0
    checkpoint_every: int = 1
    threshold: float = 0.5
    loss_smoothing: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ('beta1', 'beta2'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigValidationError(f"{name} must lie in [0, 1), got {value}")
        if self.eps_adam <= 0:
            raise ConfigValidationError(f"eps_adam must be > 0, got {self.eps_adam}")
        if self.batch_size < 1:
            raise ConfigValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 or self.epochs_large < 1:
            raise ConfigValidationError(f"epochs must be >= 1, got {self.epochs} / {self.epochs_large}")
        if self.large_set_threshold < 1:
            raise ConfigValidationError(f"large_set_threshold must be >= 1, got {self.large_set_threshold}")
        if self.seed < 0:
            raise ConfigValidationError(f"seed must be >= 0, got {self.seed}")
        if self.checkpoint_every < 1:
            raise ConfigValidationError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not 0 < self.threshold < 1:
            raise ConfigValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.loss_smoothing <= 0:
            raise ConfigValidationError(f"loss_smoothing must be > 0, got {self.loss_smoothing}")

    def epochs_for(self, n_train: int) -> int:
        return self.epochs_large if n_train > self.large_set_threshold else self.epochs

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> 'TrainConfig':
        return cls(**coerce_fields(cls, mapping))
