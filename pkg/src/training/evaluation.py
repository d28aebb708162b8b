from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from src.autodiff.tensor import Tensor
from src.data.dataset import SampleSet
from src.metrics.scores import Summary, dice_per_class, summarize
from src.metrics.stats import ScoreSample, TTestResult, paired_t_test
from src.models.segnet import predict_mask
from src.nn.layers import Layer
from src.training.checkpoint import Checkpoint
from src.utils.errors import ShapeError

DEFAULT_BATCH = 4


def predict_set(model: Layer, samples: SampleSet, threshold: float = 0.5,
                batch_size: int = DEFAULT_BATCH) -> Dict[str, np.ndarray]:
    """Thresholded (classes, h, w) masks per sample id."""
    predictions = {}
    for start in range(0, len(samples), batch_size):
        indices = list(range(start, min(start + batch_size, len(samples))))
        masks = predict_mask(model, Tensor(samples.images(indices)), threshold)
        for offset, index in enumerate(indices):
            predictions[samples[index].id] = masks[offset]
    return predictions


@dataclass
class Evaluation:
    scores: pd.DataFrame              # id, class, dice
    per_class: Dict[int, Summary]
    per_image: pd.Series              # mean Dice over classes, indexed by id

    @property
    def summary(self) -> Summary:
        return summarize(self.per_image.values)

    def describe(self) -> List[str]:
        lines = [f"class {k}: dice {summary} (n={summary.n})" for k, summary in sorted(self.per_class.items())]
        lines.append(f"overall: dice {self.summary}")
        return lines


def evaluate(model: Layer, samples: SampleSet, threshold: float = 0.5,
             batch_size: int = DEFAULT_BATCH) -> Evaluation:
    """Per-image, per-class Dice of a model in inference mode."""
    predictions = predict_set(model, samples, threshold, batch_size)
    rows = []
    for sample in samples:
        predicted = predictions[sample.id]
        if predicted.shape != sample.masks.shape:
            raise ShapeError(f"Model predicts {predicted.shape[0]} classes, '{sample.id}' has {sample.masks.shape[0]}")
        for k, dice in enumerate(dice_per_class(sample.masks, predicted)):
            rows.append({'id': sample.id, 'class': k, 'dice': dice})
    scores = pd.DataFrame(rows, columns=['id', 'class', 'dice']).sort_values(['id', 'class'], ignore_index=True)
    per_class = {int(k): summarize(group['dice'].values) for k, group in scores.groupby('class')}
    per_image = scores.groupby('id')['dice'].mean()
    return Evaluation(scores, per_class, per_image)


@dataclass
class Comparison:
    first: Evaluation
    second: Evaluation
    t_test: TTestResult
    labels: tuple = ('a', 'b')

    def describe(self) -> List[str]:
        return [
            f"{self.labels[0]}: dice {self.first.summary}",
            f"{self.labels[1]}: dice {self.second.summary}",
            self.t_test.describe(),
        ]


def compare_models(first: Layer, second: Layer, samples: SampleSet, threshold: float = 0.5,
                   labels: tuple = ('a', 'b')) -> Comparison:
    """Score two models on the same independent test set; paired t-test over images."""
    a = evaluate(first, samples, threshold)
    b = evaluate(second, samples, threshold)
    sample = ScoreSample(list(a.per_image.values), list(b.per_image.reindex(a.per_image.index).values), 'image')
    return Comparison(a, b, paired_t_test(sample), labels)


def compare_checkpoints(first: Checkpoint, second: Checkpoint, samples: SampleSet, threshold: float = 0.5,
                        labels: Optional[tuple] = None) -> Comparison:
    labels = labels or (first.model_config.arch, second.model_config.arch)
    return compare_models(first.build_model().freeze(), second.build_model().freeze(), samples, threshold, labels)
