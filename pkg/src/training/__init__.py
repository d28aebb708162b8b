from src.training.checkpoint import (
    Checkpoint,
    CheckpointStore,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    snapshot,
)
from src.training.config import TrainConfig
from src.training.crossval import CrossValidationReport, CrossValidator, cross_validate
from src.training.evaluation import Comparison, Evaluation, compare_checkpoints, compare_models, evaluate
from src.training.optimizer import Adam
from src.training.overlay import boundary, render_overlay, write_overlays
from src.training.trainer import Trainer, TrainResult, epoch_batches, train
