import os

import numpy as np
import pandas as pd
import pytest

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor
from src.data.dataset import load_dataset
from src.data.folds import make_folds
from src.data.netpbm import read_netpbm
from src.models.config import ModelConfig
from src.models.segnet import build_model
from src.nn.layers import Layer
from src.training.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore,
    save_checkpoint,
    snapshot,
)
from src.training.config import TrainConfig
from src.training.crossval import CrossValidator, config_labels, cross_validate
from src.training.evaluation import compare_models, evaluate
from src.training.optimizer import Adam
from src.training.overlay import PREDICTED_COLOR, TRUTH_COLOR, boundary, render_overlay, write_overlays
from src.training.trainer import HISTORY_COLUMNS, Trainer, epoch_batches, train
from src.utils.errors import CheckpointError, ConfigValidationError, NumericError, SegmentationError

from tests.conftest import make_synth

FAST = TrainConfig(batch_size=2, epochs=2, learning_rate=1e-3)


class Threshold(Layer):
    """Fixed predictor: foreground where the first channel is brighter than ``level``."""

    def __init__(self, level: float, gain: float = 100.0):
        super().__init__()
        self.level = level
        self.gain = gain

    def forward(self, x: Tensor) -> Tensor:
        return F.sigmoid((F.slice_channels(x, 0, 1) - self.level) * self.gain)


def _parameter(values, grad):
    tensor = Tensor(values, requires_grad=True)
    tensor.grad = np.asarray(grad, dtype=tensor.dtype)
    return tensor


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam) == (5e-5, 0.9, 0.999, 1e-8)
        assert cfg.epochs_for(250) == 500
        assert cfg.epochs_for(2500) == 85

    @pytest.mark.parametrize('kwargs', [{'learning_rate': 0}, {'beta1': 1.0}, {'batch_size': 0},
                                        {'threshold': 1.0}, {'checkpoint_every': 0}, {'seed': -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigValidationError):
            TrainConfig(**kwargs)

    def test_from_mapping(self):
        assert TrainConfig.from_mapping({'batch_size': '8', 'learning_rate': '1e-4'}) == \
            TrainConfig(batch_size=8, learning_rate=1e-4)


class TestAdam:
    def test_first_step_size(self):
        param = _parameter(np.ones(4), np.full(4, 0.5))
        lr = 1e-3
        Adam([('w', param)], TrainConfig(learning_rate=lr)).step()
        delta = np.abs(param.data - 1.0)
        assert np.all(delta >= 0.9 * lr) and np.all(delta <= lr * 1.001)

    def test_zero_gradient_leaves_parameter(self):
        param = _parameter(np.ones(3), np.zeros(3))
        optimizer = Adam([('w', param)], TrainConfig())
        optimizer.step()
        np.testing.assert_array_equal(param.data, np.ones(3))
        assert optimizer.step_count == 1

    def test_missing_gradient_counts_as_zero(self):
        param = Tensor(np.ones(2), requires_grad=True)
        Adam([('w', param)], TrainConfig()).step()
        np.testing.assert_array_equal(param.data, np.ones(2))

    def test_non_finite_gradient_names_parameter(self):
        good = _parameter(np.ones(2), np.ones(2))
        bad = _parameter(np.ones(2), [np.nan, 0.0])
        optimizer = Adam([('good', good), ('bad', bad)], TrainConfig())
        with pytest.raises(NumericError, match="'bad'"):
            optimizer.step()
        np.testing.assert_array_equal(good.data, np.ones(2))

    def test_order_of_parameters_does_not_matter(self, rng):
        grads = [rng.standard_normal(3) for _ in range(2)]

        def run(order):
            params = {name: _parameter(np.ones(3), grads[i]) for i, name in enumerate(('a', 'b'))}
            optimizer = Adam([(name, params[name]) for name in order], TrainConfig(learning_rate=0.1))
            for _ in range(3):
                optimizer.step()
            return {name: p.data.copy() for name, p in params.items()}

        forward, backward = run(['a', 'b']), run(['b', 'a'])
        for name in ('a', 'b'):
            np.testing.assert_array_equal(forward[name], backward[name])

    def test_state_round_trip(self, rng):
        param = _parameter(np.ones(3), rng.standard_normal(3))
        optimizer = Adam([('w', param)], TrainConfig())
        optimizer.step()
        other = Adam([('w', Tensor(np.ones(3), requires_grad=True))], TrainConfig())
        other.load_state_dict(optimizer.state_dict())
        assert other.step_count == 1
        np.testing.assert_array_equal(other.m['w'], optimizer.m['w'])

    def test_state_for_other_model(self):
        optimizer = Adam([('w', Tensor(np.ones(3), requires_grad=True))], TrainConfig())
        with pytest.raises(CheckpointError):
            optimizer.load_state_dict({'step': 1, 'm': {'x': np.zeros(3)}, 'v': {'x': np.zeros(3)}})


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path, mini_config, rng):
        model = build_model(mini_config, seed=3).eval()
        path = str(tmp_path / 'model.sduc')
        save_checkpoint(snapshot(model, TrainConfig(), epoch=7, history=[{'epoch': 1, 'split': 'train'}]), path)
        loaded = load_checkpoint(path)
        assert loaded.model_config == mini_config
        assert loaded.epoch == 7
        assert loaded.history == [{'epoch': 1, 'split': 'train'}]
        x = Tensor(rng.standard_normal((1, 1, 16, 16)))
        np.testing.assert_array_equal(model(x).data, loaded.build_model()(x).data)

    def test_length_law(self, mini_config):
        ckpt = snapshot(build_model(mini_config))
        data = encode_checkpoint(ckpt)
        meta_len = int.from_bytes(data[8:16], 'little')
        expected = sum(array.size for array in ckpt.weights.values()) * 4
        assert len(data) == 16 + meta_len + expected
        assert data[:4] == MAGIC

    def test_adam_state_survives(self, mini_config):
        model = build_model(mini_config)
        optimizer = Adam(model.named_parameters(), TrainConfig())
        for tensor in model.parameters():
            tensor.grad = np.ones_like(tensor.data)
        optimizer.step()
        decoded = decode_checkpoint(encode_checkpoint(snapshot(model, optimizer=optimizer)))
        fresh = build_model(mini_config)
        fresh_optimizer = Adam(fresh.named_parameters(), TrainConfig())
        restore(fresh, decoded, fresh_optimizer)
        assert fresh_optimizer.step_count == 1
        for name in optimizer.v:
            np.testing.assert_array_equal(fresh_optimizer.v[name], optimizer.v[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'broken.sduc'
        path.write_bytes(b'NOPE' + bytes(40))
        with pytest.raises(CheckpointError, match='bad magic'):
            load_checkpoint(str(path))

    def test_truncated_blob(self, mini_config):
        data = encode_checkpoint(snapshot(build_model(mini_config)))
        with pytest.raises(CheckpointError, match='Truncated'):
            decode_checkpoint(data[:-10])

    def test_restore_without_adam_state(self, mini_config):
        model = build_model(mini_config)
        with pytest.raises(CheckpointError):
            restore(model, snapshot(model), Adam(model.named_parameters(), TrainConfig()))


class TestTrainer:
    @pytest.mark.parametrize('n, size, expected', [(8, 4, [4, 4]), (9, 4, [4, 5]), (5, 2, [2, 3]), (1, 4, [1])])
    def test_batch_sizes(self, n, size, expected):
        batches = epoch_batches(n, size, seed=0, epoch=1)
        assert [len(b) for b in batches] == expected
        assert sorted(i for b in batches for i in b) == list(range(n))

    def test_batches_depend_on_epoch(self):
        assert epoch_batches(12, 4, 0, 1) == epoch_batches(12, 4, 0, 1)
        assert epoch_batches(12, 4, 0, 1) != epoch_batches(12, 4, 0, 2)

    def test_fit_writes_history_and_checkpoints(self, tmp_path, synth_root, mini_config):
        samples = load_dataset(synth_root)
        train_set, val_set = samples.subset(samples.ids[:6]), samples.subset(samples.ids[6:])
        out = str(tmp_path / 'run')
        result = train(build_model(mini_config), train_set, val_set, FAST, out)
        assert result.epochs == 2
        assert 1 <= result.best_epoch <= 2
        for name in ('best.sduc', 'last.sduc', 'history.csv'):
            assert os.path.exists(os.path.join(out, name))
        history = pd.read_csv(os.path.join(out, 'history.csv'))
        assert list(history.columns) == HISTORY_COLUMNS
        assert ((history['epoch'] == 0) & (history['split'] == 'val')).sum() == 1
        assert set(history['split']) == {'train', 'val'}
        assert load_checkpoint(os.path.join(out, 'best.sduc')).epoch == result.best_epoch

    def test_resume_matches_uninterrupted_run(self, tmp_path, synth_root, mini_config):
        samples = load_dataset(synth_root)
        train_set, val_set = samples.subset(samples.ids[:6]), samples.subset(samples.ids[6:])
        cfg = TrainConfig(batch_size=2, epochs=4, learning_rate=1e-3)

        straight = build_model(mini_config, seed=0)
        train(straight, train_set, val_set, cfg, str(tmp_path / 'a'), epochs=4)

        train(build_model(mini_config, seed=0), train_set, val_set, cfg, str(tmp_path / 'b'), epochs=2)
        resumed = build_model(mini_config, seed=9)
        result = train(resumed, train_set, val_set, cfg, str(tmp_path / 'c'), epochs=4,
                       resume_from=str(tmp_path / 'b' / 'last.sduc'))

        assert result.epochs == 4
        expected = straight.state_dict()
        for name, array in resumed.state_dict().items():
            np.testing.assert_array_equal(array, expected[name], err_msg=name)
        pd.testing.assert_frame_equal(
            pd.read_csv(str(tmp_path / 'a' / 'history.csv')), pd.read_csv(str(tmp_path / 'c' / 'history.csv'))
        )

    def test_batch_larger_than_set(self, synth_root, mini_config):
        samples = load_dataset(synth_root)
        with pytest.raises(ConfigValidationError, match='batch_size'):
            Trainer(build_model(mini_config), samples.subset(samples.ids[:2]), cfg=TrainConfig(batch_size=4))

    def test_class_count_mismatch(self, synth_root):
        samples = load_dataset(synth_root)
        cfg = ModelConfig(widths=(8, 16, 32, 64), channel_rounding='floor', out_channels=2)
        with pytest.raises(ConfigValidationError, match='class'):
            Trainer(build_model(cfg), samples, cfg=FAST)

    def test_non_finite_loss(self, synth_root, mini_config):
        model = build_model(mini_config)
        model.head.bias.data[:] = np.nan
        trainer = Trainer(model, load_dataset(synth_root), cfg=FAST)
        with pytest.raises(NumericError, match='epoch 1, batch 0'):
            trainer.fit(1)

    def test_without_validation_set(self, synth_root, mini_config):
        result = train(build_model(mini_config), load_dataset(synth_root), cfg=FAST, epochs=1)
        assert set(result.history['split']) == {'train'}
        assert result.best_path is None

    @pytest.mark.slow
    def test_overfits_small_set(self, tmp_path, mini_config):
        samples = load_dataset(make_synth(tmp_path / 'tiny', n=4, size=32, seed=1))
        cfg = TrainConfig(batch_size=4, epochs=200, learning_rate=1e-3)
        model = build_model(mini_config, seed=0)
        result = train(model, samples, cfg=cfg)
        losses = result.history.groupby('epoch')['loss'].sum().values
        windows = losses.reshape(-1, 10).mean(axis=1)
        assert np.all(np.diff(windows) <= 1e-2)
        assert evaluate(model.eval(), samples).summary.mean >= 0.95

    @pytest.mark.slow
    @pytest.mark.parametrize('arch, floor', [('sdu', 0.90), ('unet', 0.85)])
    def test_desk_scale_training(self, tmp_path, arch, floor):
        samples = load_dataset(make_synth(tmp_path / 'desk', n=250, size=64, seed=7))
        train_set = samples.subset(samples.ids[:200])
        val_set = samples.subset(samples.ids[200:])
        model = build_model(ModelConfig(widths=(16, 32, 64, 128), block_kind=arch), seed=7)
        cfg = TrainConfig(batch_size=4, learning_rate=5e-5, epochs=60, seed=7)
        trainer = Trainer(model, train_set, val_set, cfg)
        trainer.fit()
        model.load_state_dict(trainer.best_state)
        assert evaluate(model.eval(), val_set).summary.mean >= floor


class TestEvaluation:
    def test_oracle_scores_perfectly(self, clean_synth_root):
        samples = load_dataset(clean_synth_root)
        evaluation = evaluate(Threshold(0.47).eval(), samples)
        assert evaluation.summary.mean == pytest.approx(1.0)
        assert evaluation.summary.std == pytest.approx(0.0)
        assert list(evaluation.scores.columns) == ['id', 'class', 'dice']
        assert len(evaluation.scores) == len(samples)

    def test_background_predictor_scores_zero(self, clean_synth_root):
        evaluation = evaluate(Threshold(2.0).eval(), load_dataset(clean_synth_root))
        assert evaluation.summary.mean == 0.0
        assert evaluation.describe()[-1].startswith('overall: dice 0.000000')

    def test_order_of_samples_is_irrelevant(self, clean_synth_root):
        samples = load_dataset(clean_synth_root)
        reordered = samples.subset(list(reversed(samples.ids)))
        first = evaluate(Threshold(0.47).eval(), samples)
        second = evaluate(Threshold(0.47).eval(), reordered)
        pd.testing.assert_frame_equal(first.scores, second.scores)

    def test_needs_inference_mode(self, clean_synth_root):
        with pytest.raises(SegmentationError):
            evaluate(Threshold(0.47), load_dataset(clean_synth_root))

    def test_compare_identical_models(self, clean_synth_root):
        samples = load_dataset(clean_synth_root)
        comparison = compare_models(Threshold(0.47).eval(), Threshold(0.47).eval(), samples, labels=('x', 'y'))
        assert comparison.t_test.degenerate
        assert comparison.t_test.pairing == 'image'
        assert comparison.t_test.n == len(samples)


class TestCrossValidation:
    def test_labels(self, mini_config):
        unet = ModelConfig(block_kind='unet')
        assert config_labels(mini_config, None) == ['sdu']
        assert config_labels(mini_config, unet) == ['sdu', 'unet']
        assert config_labels(mini_config, mini_config) == ['sdu_a', 'sdu_b']

    def test_one_row_per_fold(self, tmp_path, mini_config):
        samples = load_dataset(make_synth(tmp_path / 'cv', n=10, size=16))
        out = str(tmp_path / 'report')
        report = cross_validate(samples, mini_config, FAST, k=5, out_dir=out, epochs=1)
        assert list(report.scores['fold']) == [0, 1, 2, 3, 4]
        assert report.scores['n_val'].sum() == 10
        assert report.summaries['sdu'].n == 5
        assert report.t_test is None
        folds = pd.read_csv(os.path.join(out, 'folds.csv'), dtype={'id': str})
        pd.testing.assert_frame_equal(folds, make_folds(samples, 5, FAST.seed).to_frame())
        assert os.path.exists(os.path.join(out, 'crossval.csv'))

    def test_epoch_selection_never_sees_scored_fold(self, tmp_path, mini_config):
        samples = load_dataset(make_synth(tmp_path / 'cv', n=10, size=16))
        validator = CrossValidator(samples, FAST, k=5)
        for fold in range(5):
            fit_set, select_set = validator.selection_split(validator.plan.training_ids(fold), FAST.seed + fold)
            scored = set(validator.plan.validation_ids(fold))
            assert (len(fit_set), len(select_set)) == (6, 2)
            assert not scored & (set(fit_set.ids) | set(select_set.ids))
            assert set(fit_set.ids) | set(select_set.ids) == set(validator.plan.training_ids(fold))
        report = CrossValidator(samples, FAST, k=5, epochs=1).run(mini_config)
        assert list(report.scores['n_select']) == [2] * 5
        assert list(report.scores['n_train']) == [6] * 5

    def test_identical_configs_are_degenerate(self, tmp_path, mini_config):
        samples = load_dataset(make_synth(tmp_path / 'cv', n=8, size=16))
        report = cross_validate(samples, mini_config, FAST, k=2, second_cfg=mini_config, epochs=1)
        a = report.scores.loc[report.scores['config'] == 'sdu_a', 'dice'].values
        b = report.scores.loc[report.scores['config'] == 'sdu_b', 'dice'].values
        np.testing.assert_array_equal(a, b)
        assert report.t_test.degenerate
        assert report.t_test.pairing == 'fold'

    def test_rejects_single_fold(self, synth_root, mini_config):
        with pytest.raises(ConfigValidationError):
            cross_validate(load_dataset(synth_root), mini_config, FAST, k=1)


class TestOverlay:
    def test_square_boundary(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:6, 2:6] = 1
        edge = boundary(mask)
        assert edge.sum() == 12
        assert not edge[3:5, 3:5].any()

    def test_border_counts_as_background(self):
        edge = boundary(np.ones((3, 3)))
        assert edge.sum() == 8 and not edge[1, 1]

    def test_colors(self):
        image = np.full((1, 8, 8), 0.5, dtype=np.float32)
        predicted = np.zeros((1, 8, 8), dtype=np.uint8)
        predicted[0, 2:6, 2:6] = 1
        truth = np.zeros((1, 8, 8), dtype=np.uint8)
        truth[0, 1:7, 1:7] = 1
        rgb = render_overlay(image, predicted, truth)
        assert rgb.shape == (8, 8, 3)
        assert tuple(rgb[2, 2]) == PREDICTED_COLOR
        assert tuple(rgb[1, 1]) == TRUTH_COLOR
        assert tuple(rgb[0, 0]) == (128, 128, 128)

    def test_write_overlays(self, tmp_path, clean_synth_root):
        samples = load_dataset(clean_synth_root)
        paths = write_overlays(Threshold(0.47).eval(), samples, str(tmp_path / 'overlays'))
        assert len(paths) == len(samples)
        pixels, _ = read_netpbm(paths[0])
        assert pixels.shape == (16, 16, 3)
