import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import pandas as pd

from src.data.dataset import SampleSet
from src.data.folds import FoldPlan, holdout_split, make_folds
from src.metrics.scores import Summary, summarize
from src.metrics.stats import ScoreSample, TTestResult, paired_t_test
from src.models.config import ModelConfig
from src.models.segnet import build_model
from src.training.config import TrainConfig
from src.training.evaluation import evaluate
from src.training.trainer import Trainer
from src.utils.errors import ConfigValidationError
from src.utils.logger import setup_logger

REPORT_COLUMNS = ['config', 'fold', 'n_train', 'n_select', 'n_val', 'best_epoch', 'dice']


@dataclass
class CrossValidationReport:
    plan: FoldPlan
    scores: pd.DataFrame
    summaries: Dict[str, Summary]
    t_test: Optional[TTestResult] = None

    def describe(self) -> List[str]:
        lines = []
        for label, summary in self.summaries.items():
            lines.append(f"{label}: dice {summary} over {summary.n} folds")
        if self.t_test is not None:
            lines.append(self.t_test.describe())
        return lines

    def to_csv(self, path: str):
        self.scores.to_csv(path, index=False)


def config_labels(first: ModelConfig, second: Optional[ModelConfig]) -> List[str]:
    if second is None:
        return [first.arch]
    if first.arch == second.arch:
        return [f'{first.arch}_a', f'{second.arch}_b']
    return [first.arch, second.arch]


class CrossValidator:
    """k-fold protocol: train on the fold complement, score on the held-out fold.

    Fold f trains with seed ``seed + f`` for both the initialization and the
    batch order, so two configurations see identical folds and seeds. The best
    epoch is picked on a seeded 8:2 holdout of the fold's training ids, never
    on the held-out fold it is scored on.
    """

    def __init__(self, samples: SampleSet, train_cfg: TrainConfig, k: int = 5,
                 out_dir: Optional[str] = None, jobs: int = 1, epochs: Optional[int] = None):
        if jobs < 1:
            raise ConfigValidationError(f"jobs must be >= 1, got {jobs}")
        self.samples = samples
        self.train_cfg = train_cfg
        self.k = k
        self.out_dir = out_dir
        self.jobs = jobs
        self.epochs = epochs
        self.plan = make_folds(samples, k, train_cfg.seed)
        self.logger = setup_logger('CrossValidator')

    def selection_split(self, ids: List[str], seed: int) -> Tuple[SampleSet, Optional[SampleSet]]:
        """Training ids minus an epoch-selection holdout; no holdout when too few ids remain."""
        if len(ids) < 2:
            return self.samples.subset(ids), None
        fit_ids, select_ids = holdout_split(ids, seed=seed)
        if len(fit_ids) < self.train_cfg.batch_size:
            self.logger.warning(f"Only {len(ids)} training ids; selecting the best epoch on training Dice")
            return self.samples.subset(ids), None
        return self.samples.subset(fit_ids), self.samples.subset(select_ids)

    def run_fold(self, label: str, model_cfg: ModelConfig, fold: int) -> Dict:
        seed = self.train_cfg.seed + fold
        cfg = replace(self.train_cfg, seed=seed)
        train_set, select_set = self.selection_split(self.plan.training_ids(fold), seed)
        val_set = self.samples.subset(self.plan.validation_ids(fold))
        fold_dir = os.path.join(self.out_dir, label, f'fold{fold}') if self.out_dir else None

        self.logger.info(f"[{label}] fold {fold + 1}/{self.k}: {len(train_set)} train / "
                         f"{len(select_set) if select_set is not None else 0} select / {len(val_set)} val")
        model = build_model(model_cfg, seed)
        trainer = Trainer(model, train_set, select_set, cfg, fold_dir)
        result = trainer.fit(self.epochs)
        if trainer.best_state is not None:
            model.load_state_dict(trainer.best_state)
        model.eval()
        evaluation = evaluate(model, val_set, cfg.threshold)
        dice = evaluation.summary.mean
        self.logger.info(f"[{label}] fold {fold + 1}/{self.k}: dice {dice:.4f} (best epoch {result.best_epoch})")
        return {'config': label, 'fold': fold, 'n_train': len(train_set),
                'n_select': len(select_set) if select_set is not None else 0, 'n_val': len(val_set),
                'best_epoch': result.best_epoch, 'dice': dice}

    def run(self, first: ModelConfig, second: Optional[ModelConfig] = None) -> CrossValidationReport:
        labels = config_labels(first, second)
        configs = [first] if second is None else [first, second]
        tasks: List[Tuple[str, ModelConfig, int]] = [
            (label, cfg, fold) for label, cfg in zip(labels, configs) for fold in range(self.k)
        ]
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            self.plan.to_csv(os.path.join(self.out_dir, 'folds.csv'))

        with ThreadPoolExecutor(max_workers=self.jobs) as executor:
            rows = list(executor.map(lambda task: self.run_fold(*task), tasks))

        scores = pd.DataFrame(rows, columns=REPORT_COLUMNS).sort_values(['config', 'fold'], ignore_index=True)
        summaries = {label: summarize(scores.loc[scores['config'] == label, 'dice'].values) for label in labels}

        t_test = None
        if second is not None:
            a = scores.loc[scores['config'] == labels[0]].sort_values('fold')['dice'].tolist()
            b = scores.loc[scores['config'] == labels[1]].sort_values('fold')['dice'].tolist()
            t_test = paired_t_test(ScoreSample(a, b, 'fold'))

        report = CrossValidationReport(self.plan, scores, summaries, t_test)
        if self.out_dir:
            report.to_csv(os.path.join(self.out_dir, 'crossval.csv'))
        for line in report.describe():
            self.logger.info(line)
        return report


def cross_validate(samples: SampleSet, model_cfg: ModelConfig, train_cfg: TrainConfig, k: int = 5,
                   second_cfg: Optional[ModelConfig] = None, out_dir: Optional[str] = None,
                   jobs: int = 1, epochs: Optional[int] = None) -> CrossValidationReport:
    return CrossValidator(samples, train_cfg, k, out_dir, jobs, epochs).run(model_cfg, second_cfg)
