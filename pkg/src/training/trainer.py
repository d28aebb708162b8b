import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.autodiff.tensor import Tensor, backward, get_tape, no_grad
from src.data.dataset import SampleSet
from src.metrics.losses import bi_dice_loss, bi_dice_per_class
from src.metrics.scores import dice_per_class
from src.models.segnet import SegmentationNet, threshold_mask
from src.training.checkpoint import CheckpointStore, restore, snapshot
from src.training.config import TrainConfig
from src.training.optimizer import Adam
from src.utils.errors import ConfigValidationError, NumericError
from src.utils.logger import setup_logger

HISTORY_COLUMNS = ['epoch', 'split', 'class', 'loss', 'dice']
HISTORY_FILE = 'history.csv'
BEST_FILE = 'best.sduc'
LAST_FILE = 'last.sduc'


def epoch_batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    """Seeded shuffle for one epoch cut into mini-batches.

    The last partial batch is kept; a trailing singleton is merged into the
    previous batch so batch statistics never see a single image.
    """
    order = np.random.default_rng([seed, epoch]).permutation(n_samples).tolist()
    batches = [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


@dataclass
class TrainResult:
    history: pd.DataFrame
    best_epoch: int
    best_dice: float
    epochs: int
    best_path: Optional[str] = None
    last_path: Optional[str] = None
    history_path: Optional[str] = None


class Trainer:
    """Mini-batch Adam on the bi-Dice loss with per-epoch validation.

    The best validation Dice (mean over classes) selects ``best.sduc``;
    ``last.sduc`` is written every ``checkpoint_every`` epochs and at the end.
    Without a validation set the training Dice selects the best epoch.
    """

    def __init__(self, model: SegmentationNet, train_set: SampleSet, val_set: Optional[SampleSet] = None,
                 cfg: Optional[TrainConfig] = None, out_dir: Optional[str] = None):
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg or TrainConfig()
        self.out_dir = out_dir
        self.logger = setup_logger('Trainer')
        self.store = CheckpointStore()

        if self.cfg.batch_size > len(train_set):
            raise ConfigValidationError(
                f"batch_size {self.cfg.batch_size} exceeds the training set size {len(train_set)}"
            )
        for name, samples in (('training', train_set), ('validation', val_set)):
            if samples is not None and samples.n_classes != model.cfg.out_channels:
                raise ConfigValidationError(
                    f"The {name} set has {samples.n_classes} class(es) but the model predicts {model.cfg.out_channels}"
                )

        self.optimizer = Adam(model.named_parameters(), self.cfg)
        self.epoch = 0
        self.rows: List[Dict[str, Any]] = []
        self.best_epoch = 0
        self.best_dice = -1.0
        self.best_state: Optional[Dict[str, np.ndarray]] = None

        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def _path(self, name: str) -> Optional[str]:
        return os.path.join(self.out_dir, name) if self.out_dir else None

    def resume(self, path: str):
        """Continue from a checkpoint written by a previous run (weights, Adam state, history)."""
        ckpt = self.store.load(path)
        restore(self.model, ckpt, self.optimizer)
        self.epoch = ckpt.epoch
        self.rows = list(ckpt.history)
        self.best_epoch = int(ckpt.extra.get('best_epoch', 0))
        self.best_dice = float(ckpt.extra.get('best_dice', -1.0))
        self.logger.info(f"Resumed from {path} at epoch {self.epoch}")

    def _record(self, epoch: int, split: str, losses: np.ndarray, dices: np.ndarray):
        for k in range(losses.shape[0]):
            self.rows.append({'epoch': epoch, 'split': split, 'class': k,
                              'loss': float(losses[k]), 'dice': float(dices[k])})

    def train_epoch(self, epoch: int) -> Dict[str, np.ndarray]:
        """One pass over the training set; returns per-class mean loss and Dice."""
        self.model.train()
        n_classes = self.model.cfg.out_channels
        loss_rows, dice_rows = [], []
        batches = epoch_batches(len(self.train_set), self.cfg.batch_size, self.cfg.seed, epoch)
        for batch_index, indices in enumerate(batches):
            images = Tensor(self.train_set.images(indices))
            masks = self.train_set.masks(indices)

            self.optimizer.zero_grad()
            get_tape().reset()
            probabilities = self.model(images)
            loss = bi_dice_loss(probabilities, masks, self.cfg.loss_smoothing)
            if not np.isfinite(loss.item()):
                get_tape().reset()
                self.logger.error(f"Non-finite loss at epoch {epoch}, batch {batch_index}")
                raise NumericError(f"Non-finite loss at epoch {epoch}, batch {batch_index}")
            backward(loss)
            self.optimizer.step()

            loss_rows.append(bi_dice_per_class(probabilities.data, masks, self.cfg.loss_smoothing))
            predicted = threshold_mask(probabilities.data, self.cfg.threshold)
            dice_rows.extend(dice_per_class(m, p) for m, p in zip(masks, predicted))

        losses = np.concatenate(loss_rows).reshape(-1, n_classes)
        return {'loss': losses.mean(axis=0), 'dice': np.asarray(dice_rows).reshape(-1, n_classes).mean(axis=0)}

    def validate(self) -> Dict[str, np.ndarray]:
        was_training = self.model.training
        self.model.eval()
        loss_rows, dice_rows = [], []
        try:
            with no_grad():
                for start in range(0, len(self.val_set), self.cfg.batch_size):
                    indices = list(range(start, min(start + self.cfg.batch_size, len(self.val_set))))
                    masks = self.val_set.masks(indices)
                    probabilities = self.model(Tensor(self.val_set.images(indices))).data
                    loss_rows.append(bi_dice_per_class(probabilities, masks, self.cfg.loss_smoothing))
                    predicted = threshold_mask(probabilities, self.cfg.threshold)
                    dice_rows.extend(dice_per_class(m, p) for m, p in zip(masks, predicted))
        finally:
            self.model.train(was_training)
        n_classes = self.model.cfg.out_channels
        losses = np.concatenate(loss_rows).reshape(-1, n_classes)
        return {'loss': losses.mean(axis=0), 'dice': np.asarray(dice_rows).reshape(-1, n_classes).mean(axis=0)}

    def history(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def _write_history(self):
        if self.out_dir:
            self.history().to_csv(self._path(HISTORY_FILE), index=False)

    def _save(self, name: str):
        ckpt = snapshot(self.model, self.cfg, self.epoch, self.rows, self.optimizer,
                        extra={'best_epoch': self.best_epoch, 'best_dice': self.best_dice})
        self.store.save(ckpt, self._path(name))

    def fit(self, epochs: Optional[int] = None) -> TrainResult:
        """Train up to ``epochs`` total epochs (default from the config and set size)."""
        total = epochs or self.cfg.epochs_for(len(self.train_set))

        if self.epoch == 0 and self.val_set is not None and not self.rows:
            initial = self.validate()
            self._record(0, 'val', initial['loss'], initial['dice'])
            self.logger.info(f"Epoch 0/{total} - val loss {initial['loss'].sum():.4f} "
                             f"dice {initial['dice'].mean():.4f}")

        while self.epoch < total:
            self.epoch += 1
            train_stats = self.train_epoch(self.epoch)
            self._record(self.epoch, 'train', train_stats['loss'], train_stats['dice'])
            message = (f"Epoch {self.epoch}/{total} - train loss {train_stats['loss'].sum():.4f} "
                       f"dice {train_stats['dice'].mean():.4f}")

            selection = train_stats
            if self.val_set is not None:
                selection = self.validate()
                self._record(self.epoch, 'val', selection['loss'], selection['dice'])
                message += f" | val loss {selection['loss'].sum():.4f} dice {selection['dice'].mean():.4f}"
            self.logger.info(message)

            score = float(selection['dice'].mean())
            if score > self.best_dice:
                self.best_dice = score
                self.best_epoch = self.epoch
                self.best_state = self.model.state_dict()
                if self.out_dir:
                    self._save(BEST_FILE)

            if self.out_dir and (self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == total):
                self._save(LAST_FILE)
            self._write_history()

        self.logger.info(f"Training finished after {self.epoch} epochs; best dice {self.best_dice:.4f} "
                         f"at epoch {self.best_epoch}")
        return TrainResult(
            history=self.history(),
            best_epoch=self.best_epoch,
            best_dice=self.best_dice,
            epochs=self.epoch,
            best_path=self._path(BEST_FILE),
            last_path=self._path(LAST_FILE),
            history_path=self._path(HISTORY_FILE),
        )


def train(model: SegmentationNet, train_set: SampleSet, val_set: Optional[SampleSet] = None,
          cfg: Optional[TrainConfig] = None, out_dir: Optional[str] = None,
          epochs: Optional[int] = None, resume_from: Optional[str] = None) -> TrainResult:
    trainer = Trainer(model, train_set, val_set, cfg, out_dir)
    if resume_from:
        trainer.resume(resume_from)
    return trainer.fit(epochs)
