# Trainable-parameter accounting.
# Demo Output (default widths, in=1, out=1, no norm):
#   sdu   total  3,755,137
#   unet  total  8,556,353
#   ratio 0.439

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import pandas as pd

from src.nn.layers import Layer

# Totals printed in the published parameter table, kept for display next to ours.
PUBLISHED_PARAMETERS: Dict[str, int] = {
    'SDU-Net': 6_028_833,
    'U-Net': 14_787_777,
    'AttU-Net': 34_877_421,
    'R2U-Net': 39_091_265,
}

NORM_PARAMETERS = ('scale', 'shift')


@dataclass(frozen=True)
class ParameterRow:
    name: str
    shape: Tuple[int, ...]
    count: int

    @property
    def is_norm(self) -> bool:
        return self.name.rsplit('.', 1)[-1] in NORM_PARAMETERS


@dataclass
class ParameterReport:
    label: str
    rows: List[ParameterRow]
    ratio_vs: Optional[Dict[str, float]] = field(default=None)

    @property
    def total(self) -> int:
        return sum(row.count for row in self.rows)

    @property
    def total_without_norm(self) -> int:
        return sum(row.count for row in self.rows if not row.is_norm)

    @property
    def totals(self) -> Dict[str, int]:
        return {'with_norm': self.total, 'without_norm': self.total_without_norm}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{'name': row.name, 'shape': 'x'.join(map(str, row.shape)), 'count': row.count} for row in self.rows],
            columns=['name', 'shape', 'count'],
        )

    def format_table(self) -> str:
        lines = [
            f"Parameters for {self.label}:",
            "Name".ljust(36) + "Shape".rjust(20) + "Count".rjust(14),
            "-" * 70,
        ]
        for row in self.rows:
            shape = 'x'.join(map(str, row.shape))
            lines.append(f"{row.name:<36}{shape:>20}{row.count:>14,}")
        lines.append("-" * 70)
        lines.append(f"{'Total (with norm)':<56}{self.total:>14,}")
        lines.append(f"{'Total (without norm)':<56}{self.total_without_norm:>14,}")
        if self.ratio_vs:
            lines.append(
                f"Ratio vs {self.ratio_vs['label']} ({int(self.ratio_vs['total']):,}): {self.ratio_vs['ratio']:.4f}"
            )
        return "\n".join(lines)


def count_parameters(model: Layer, compare_with: Optional[Layer] = None, label: Optional[str] = None,
                     compare_label: Optional[str] = None) -> ParameterReport:
    """Exact per-tensor parameter counts, optionally with the ratio against a second model."""
    rows = [ParameterRow(name, tuple(tensor.shape), int(tensor.data.size)) for name, tensor in model.named_parameters()]
    report = ParameterReport(label or _default_label(model), rows)
    if compare_with is not None:
        other = count_parameters(compare_with, label=compare_label)
        report.ratio_vs = {
            'label': other.label,
            'total': float(other.total),
            'ratio': report.total / other.total,
        }
    return report


def compare_with_reference(report: ParameterReport, reference_key: str) -> Dict[str, float]:
    """Delta between our total and the published one for ``reference_key``."""
    reference = PUBLISHED_PARAMETERS[reference_key]
    return {
        'reference': reference,
        'ours': report.total,
        'delta': report.total - reference,
        'ratio': report.total / reference,
    }


def _default_label(model: Layer) -> str:
    cfg = getattr(model, 'cfg', None)
    arch = getattr(cfg, 'arch', None)
    return arch or type(model).__name__
