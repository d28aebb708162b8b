from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import stdtr

from src.utils.errors import ShapeError

PAIRINGS = ('image', 'fold')


@dataclass(frozen=True)
class ScoreSample:
    """Paired metric values for two methods; index i of both lists refers to the same item."""
    first: Sequence[float]
    second: Sequence[float]
    pairing: str = 'image'

    def __post_init__(self):
        if len(self.first) != len(self.second):
            raise ShapeError(f"Paired samples differ in length: {len(self.first)} vs {len(self.second)}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")

    @classmethod
    def from_differences(cls, differences: Sequence[float], pairing: str = 'image') -> 'ScoreSample':
        return cls(list(differences), [0.0] * len(differences), pairing)

    @property
    def differences(self) -> np.ndarray:
        return np.asarray(self.first, dtype=np.float64) - np.asarray(self.second, dtype=np.float64)


@dataclass(frozen=True)
class TTestResult:
    n: int
    degrees_of_freedom: int
    mean_difference: float
    pairing: str
    t: Optional[float] = None
    two_sided_p: Optional[float] = None
    degenerate: bool = False

    def describe(self) -> str:
        if self.degenerate:
            return f"paired t-test ({self.pairing}, n={self.n}): degenerate (zero variance of differences)"
        return (f"paired t-test ({self.pairing}, n={self.n}): t={self.t:.4f}, "
                f"df={self.degrees_of_freedom}, p={self.two_sided_p:.4g}")


def paired_t_test(sample: ScoreSample) -> TTestResult:
    """Two-sided paired t-test on first - second.

    t = mean(d) / (sd(d) / sqrt(n)), df = n - 1; p from the Student-t CDF.
    Zero-variance differences give a degenerate result instead of a number.
    """
    d = sample.differences
    n = int(d.size)
    if n < 2:
        raise ShapeError(f"paired_t_test needs at least 2 pairs, got {n}")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # Equal differences may carry rounding noise far below any real score spread
    if float(np.ptp(d)) <= 1e-12 * max(1.0, abs(mean)) or not np.isfinite(sd):
        return TTestResult(n, n - 1, mean, sample.pairing, degenerate=True)
    t = mean / (sd / np.sqrt(n))
    p = float(2.0 * stdtr(n - 1, -abs(t)))
    return TTestResult(n, n - 1, mean, sample.pairing, t=float(t), two_sided_p=min(1.0, p))
