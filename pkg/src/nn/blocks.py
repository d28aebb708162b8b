# Encoder/decoder operations: everything applied to feature maps of one resolution.
#
#   DoubleConvBlock  conv3x3 -> conv3x3                     (U-Net)
#   SduBlock         conv3x3 -> dilated conv cascade -> concat of every branch output
#
# Default SDU split for n_out = 64:
#   branch   0   1   2   3   4
#   rate     1   2   4   8  16
#   width   32  16   8   4   4   -> concat = 64 channels

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Tuple

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor
from src.nn.layers import ConvNormAct, Layer
from src.utils.errors import ConfigValidationError

DEFAULT_SPLIT = (0.5, 0.25, 0.125, 0.0625, 0.0625)
DEFAULT_RATES = (1, 2, 4, 8, 16)
SEPARATE_STEM_RATES = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class SduBlockConfig:
    n_in: int
    n_out: int
    split_fractions: Tuple[float, ...] = DEFAULT_SPLIT
    dilation_rates: Tuple[int, ...] = DEFAULT_RATES
    use_norm: bool = True
    # 'branch': the standard conv is branch 0 and is concatenated.
    # 'separate': an unconcatenated standard conv stem feeds the dilated branches.
    stem: str = 'branch'
    # 'strict' rejects fractional branch widths; 'floor' rounds and lets branch 0 absorb the rest.
    rounding: str = 'strict'
    repeat_last_rate: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'split_fractions', tuple(float(f) for f in self.split_fractions))
        object.__setattr__(self, 'dilation_rates', tuple(int(r) for r in self.dilation_rates))

        if self.n_in < 1 or self.n_out < 1:
            raise ConfigValidationError(f"Block channels must be >= 1, got {self.n_in}->{self.n_out}")
        if self.stem not in ('branch', 'separate'):
            raise ConfigValidationError(f"stem must be 'branch' or 'separate', got {self.stem!r}")
        if self.rounding not in ('strict', 'floor'):
            raise ConfigValidationError(f"rounding must be 'strict' or 'floor', got {self.rounding!r}")
        if not self.split_fractions:
            raise ConfigValidationError("split_fractions must not be empty")
        if any(f <= 0 for f in self.split_fractions):
            raise ConfigValidationError(f"split_fractions must be positive, got {self.split_fractions}")
        total = sum(Fraction(f).limit_denominator(1 << 16) for f in self.split_fractions)
        if total != 1:
            raise ConfigValidationError(f"split_fractions must sum to 1, got {float(total)}")
        if len(self.dilation_rates) != len(self.split_fractions):
            raise ConfigValidationError(
                f"dilation_rates ({len(self.dilation_rates)}) and split_fractions "
                f"({len(self.split_fractions)}) must have equal length"
            )
        if min(self.dilation_rates) < 1:
            raise ConfigValidationError(f"dilation_rates must be >= 1, got {self.dilation_rates}")
        if self.stem == 'branch' and self.dilation_rates[0] != 1:
            raise ConfigValidationError(
                f"The first branch is the standard convolution and must use rate 1, got {self.dilation_rates[0]}"
            )
        if any(b <= a for a, b in zip(self.dilation_rates, self.dilation_rates[1:])):
            raise ConfigValidationError(f"dilation_rates must be strictly increasing, got {self.dilation_rates}")
        if self.repeat_last_rate and len(self.dilation_rates) < 2:
            raise ConfigValidationError("repeat_last_rate needs at least two branches")
        # Fails early on fractional widths
        self.branch_widths()

    @classmethod
    def separate_stem(cls, n_in: int, n_out: int, **kwargs) -> 'SduBlockConfig':
        """Alternative reading: standard conv stem, then five concatenated dilated branches."""
        kwargs.setdefault('dilation_rates', SEPARATE_STEM_RATES)
        return cls(n_in=n_in, n_out=n_out, stem='separate', **kwargs)

    @property
    def stem_width(self) -> int:
        return max(1, self.n_out // 2)

    def branch_rates(self) -> Tuple[int, ...]:
        if self.repeat_last_rate:
            return self.dilation_rates[:-1] + (self.dilation_rates[-2],)
        return self.dilation_rates

    def branch_widths(self) -> Tuple[int, ...]:
        exact = [Fraction(f).limit_denominator(1 << 16) * self.n_out for f in self.split_fractions]
        if self.rounding == 'strict':
            for index, width in enumerate(exact):
                if width.denominator != 1 or width < 1:
                    raise ConfigValidationError(
                        f"Branch {index} width n_out*{self.split_fractions[index]} = {float(width)} "
                        f"is not a positive integer (n_out={self.n_out})"
                    )
            return tuple(int(width) for width in exact)

        rest = [max(1, int(width)) for width in exact[1:]]
        first = self.n_out - sum(rest)
        if first < 1:
            raise ConfigValidationError(
                f"n_out={self.n_out} is too small for {len(exact)} branches of at least one channel"
            )
        return (first,) + tuple(rest)


class DoubleConvBlock(Layer):
    """Two standard 3x3 convolutions (each with optional norm and ReLU)."""

    def __init__(self, n_in: int, n_out: int, use_norm: bool = True):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        self.conv1 = self.add_child('conv1', ConvNormAct(n_in, n_out, 1, use_norm))
        self.conv2 = self.add_child('conv2', ConvNormAct(n_out, n_out, 1, use_norm))

    @property
    def branch_widths(self) -> Tuple[int, ...]:
        return (self.n_out,)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        (extent,), jump = self.conv1.trace_receptive_field(extent, jump)
        return self.conv2.trace_receptive_field(extent, jump)


class SduBlock(Layer):
    """One standard convolution followed by cascaded dilated convolutions.

    Branch i consumes branch i-1's output; the block output is the channel
    concatenation of every branch, n_out channels in total.
    """

    def __init__(self, cfg: SduBlockConfig):
        super().__init__()
        self.cfg = cfg
        self.n_in = cfg.n_in
        self.n_out = cfg.n_out
        widths = cfg.branch_widths()
        rates = cfg.branch_rates()

        self.stem = None
        channels = cfg.n_in
        if cfg.stem == 'separate':
            self.stem = self.add_child('stem', ConvNormAct(cfg.n_in, cfg.stem_width, 1, cfg.use_norm))
            channels = cfg.stem_width

        self.branches: List[ConvNormAct] = []
        for index, (width, rate) in enumerate(zip(widths, rates)):
            branch = self.add_child(f'branch{index}', ConvNormAct(channels, width, rate, cfg.use_norm))
            self.branches.append(branch)
            channels = width

    @property
    def branch_widths(self) -> Tuple[int, ...]:
        return tuple(branch.out_channels for branch in self.branches)

    def forward(self, x: Tensor) -> Tensor:
        if self.stem is not None:
            x = self.stem(x)
        outputs = []
        for branch in self.branches:
            x = branch(x)
            outputs.append(x)
        return F.concat_channels(outputs)

    def trace_receptive_field(self, extent: int, jump: int) -> Tuple[Tuple[int, ...], int]:
        if self.stem is not None:
            (extent,), jump = self.stem.trace_receptive_field(extent, jump)
        extents = []
        for branch in self.branches:
            (extent,), jump = branch.trace_receptive_field(extent, jump)
            extents.append(extent)
        return tuple(extents), jump


def double_conv_block(n_in: int, n_out: int, use_norm: bool = True) -> DoubleConvBlock:
    return DoubleConvBlock(n_in, n_out, use_norm)


def sdu_block(cfg: SduBlockConfig) -> SduBlock:
    return SduBlock(cfg)
