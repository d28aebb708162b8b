from dataclasses import dataclass
from typing import Any, Mapping, Tuple

from src.nn.blocks import DEFAULT_RATES, DEFAULT_SPLIT
from src.utils.config import coerce_fields
from src.utils.errors import ConfigValidationError

BLOCK_KINDS = ('sdu', 'double_conv')
ARCH_ALIASES = {'sdu': 'sdu', 'sdunet': 'sdu', 'unet': 'double_conv', 'double_conv': 'double_conv'}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    block_kind: str = 'sdu'
    use_norm: bool = True
    upsample_mode: str = 'bilinear'
    channel_rounding: str = 'strict'
    sdu_stem: str = 'branch'
    split_fractions: Tuple[float, ...] = DEFAULT_SPLIT
    dilation_rates: Tuple[int, ...] = DEFAULT_RATES

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        object.__setattr__(self, 'split_fractions', tuple(float(f) for f in self.split_fractions))
        object.__setattr__(self, 'dilation_rates', tuple(int(r) for r in self.dilation_rates))
        object.__setattr__(self, 'block_kind', ARCH_ALIASES.get(self.block_kind, self.block_kind))

        if self.in_channels < 1:
            raise ConfigValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ConfigValidationError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigValidationError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if len(self.widths) != 4:
            raise ConfigValidationError(f"widths must list exactly 4 levels, got {self.widths}")
        if min(self.widths) < 1 or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigValidationError(f"widths must be positive and strictly increasing, got {self.widths}")
        if self.upsample_mode not in ('nearest', 'bilinear'):
            raise ConfigValidationError(f"upsample_mode must be 'nearest' or 'bilinear', got {self.upsample_mode!r}")
        if self.channel_rounding not in ('strict', 'floor'):
            raise ConfigValidationError(f"channel_rounding must be 'strict' or 'floor', got {self.channel_rounding!r}")
        if self.block_kind == 'sdu' and self.channel_rounding == 'strict':
            odd = [w for w in self.widths if w % 16]
            if odd:
                raise ConfigValidationError(
                    f"SDU widths must be divisible by 16 for integral branch splits, got {odd} "
                    f"(use channel_rounding=floor for miniature models)"
                )

    @property
    def arch(self) -> str:
        return 'sdu' if self.block_kind == 'sdu' else 'unet'

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> 'ModelConfig':
        return cls(**coerce_fields(cls, mapping))
