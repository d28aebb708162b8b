from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.data.dataset import SampleSet
from src.utils.errors import ConfigValidationError, DataError

DEFAULT_FOLDS = 5
VALIDATION_SHARE = 0.2


@dataclass(frozen=True)
class FoldPlan:
    """id -> fold index. Fold i validates while the other folds train."""
    assignments: Dict[str, int]
    k: int
    seed: Optional[int] = None

    @property
    def ids(self) -> List[str]:
        return sorted(self.assignments)

    def validation_ids(self, fold: int) -> List[str]:
        self._check_fold(fold)
        return [i for i in self.ids if self.assignments[i] == fold]

    def training_ids(self, fold: int) -> List[str]:
        self._check_fold(fold)
        return [i for i in self.ids if self.assignments[i] != fold]

    def sizes(self) -> List[int]:
        return [len(self.validation_ids(fold)) for fold in range(self.k)]

    def _check_fold(self, fold: int):
        if not 0 <= fold < self.k:
            raise ConfigValidationError(f"Fold index {fold} outside [0, {self.k})")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'id': self.ids, 'fold': [self.assignments[i] for i in self.ids]})

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str) -> 'FoldPlan':
        try:
            frame = pd.read_csv(path, dtype={'id': str, 'fold': int})
        except (OSError, ValueError) as e:
            raise DataError(f"Cannot read fold plan {path}: {e}")
        if list(frame.columns) != ['id', 'fold']:
            raise DataError(f"Fold plan {path} must have columns id,fold; got {','.join(frame.columns)}")
        assignments = dict(zip(frame['id'], (int(f) for f in frame['fold'])))
        return cls(assignments, int(frame['fold'].max()) + 1)


def _ids_of(samples: Union[SampleSet, Sequence[str]]) -> List[str]:
    ids = samples.ids if isinstance(samples, SampleSet) else list(samples)
    if len(set(ids)) != len(ids):
        raise DataError("Sample ids must be unique")
    return sorted(ids)


def make_folds(samples: Union[SampleSet, Sequence[str]], k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of the sorted ids, then round-robin assignment.

    Fold sizes differ by at most one; the first ``N mod k`` folds get the extra id.
    """
    if k < 2:
        raise ConfigValidationError(f"Cross-validation needs k >= 2, got {k}")
    if seed < 0:
        raise ConfigValidationError(f"Fold seed must be >= 0, got {seed}")
    ids = _ids_of(samples)
    if len(ids) < k:
        raise ConfigValidationError(f"Cannot split {len(ids)} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[index]: position % k for position, index in enumerate(order)}
    return FoldPlan(assignments, k, seed)


def holdout_split(samples: Union[SampleSet, Sequence[str]], validation_share: float = VALIDATION_SHARE,
                  seed: int = 0) -> Tuple[List[str], List[str]]:
    """Seeded train/validation split; 0.2 gives the 8:2 ratio."""
    if not 0 < validation_share < 1:
        raise ConfigValidationError(f"validation_share must lie in (0, 1), got {validation_share}")
    if seed < 0:
        raise ConfigValidationError(f"Holdout seed must be >= 0, got {seed}")
    ids = _ids_of(samples)
    if len(ids) < 2:
        raise ConfigValidationError(f"A holdout split needs at least 2 samples, got {len(ids)}")
    n_val = min(len(ids) - 1, max(1, int(round(len(ids) * validation_share))))
    order = np.random.default_rng(seed).permutation(len(ids))
    validation = sorted(ids[i] for i in order[:n_val])
    training = sorted(ids[i] for i in order[n_val:])
    return training, validation
