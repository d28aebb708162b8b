import numpy as np
import pytest

from src.autodiff import functional as F
from src.autodiff.gradcheck import gradcheck
from src.autodiff.tensor import Tensor, no_grad, wide_precision
from src.models.config import ModelConfig
from src.models.parameters import PUBLISHED_PARAMETERS, compare_with_reference, count_parameters
from src.models.segnet import SegmentationNet, build_model, predict_mask, round_extent, threshold_mask
from src.utils.errors import ConfigValidationError, SegmentationError, ShapeError


class TestModelConfig:
    def test_aliases(self):
        assert ModelConfig(block_kind='unet').block_kind == 'double_conv'
        assert ModelConfig(block_kind='unet').arch == 'unet'
        assert ModelConfig().arch == 'sdu'

    def test_strict_sdu_needs_widths_divisible_by_16(self):
        with pytest.raises(ConfigValidationError, match='divisible by 16'):
            ModelConfig(widths=(8, 16, 32, 64))

    def test_floor_rounding_allows_miniature_widths(self, mini_config):
        assert mini_config.widths == (8, 16, 32, 64)

    @pytest.mark.parametrize('kwargs', [
        {'widths': (64, 128, 256)},
        {'widths': (64, 64, 256, 512)},
        {'upsample_mode': 'cubic'},
        {'block_kind': 'resnet'},
        {'in_channels': 0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigValidationError):
            ModelConfig(**kwargs)

    def test_from_mapping_coerces_strings(self):
        cfg = ModelConfig.from_mapping({'widths': '32,64,128,256', 'use_norm': 'false', 'block_kind': 'unet'})
        assert cfg == ModelConfig(widths=(32, 64, 128, 256), use_norm=False, block_kind='double_conv')


class TestSegmentationNet:
    @pytest.mark.parametrize('arch', ['sdu', 'unet'])
    def test_output_shape_and_range(self, arch, rng):
        cfg = ModelConfig(widths=(8, 16, 32, 64), block_kind=arch, channel_rounding='floor', out_channels=2)
        model = build_model(cfg, seed=0)
        out = model(Tensor(rng.standard_normal((2, 1, 16, 24))))
        assert out.shape == (2, 2, 16, 24)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_default_model_forward(self, rng):
        model = build_model(ModelConfig(), seed=0).eval()
        with no_grad():
            out = model(Tensor(rng.standard_normal((1, 1, 64, 64))))
        assert out.shape == (1, 1, 64, 64)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_indivisible_extent_suggests_resize(self, mini_config):
        model = build_model(mini_config)
        with pytest.raises(ShapeError, match='resize to 16x16'):
            model(Tensor(np.zeros((1, 1, 12, 12))))

    def test_channel_mismatch(self, mini_config):
        with pytest.raises(ShapeError, match='channel'):
            build_model(mini_config)(Tensor(np.zeros((1, 3, 16, 16))))

    def test_same_seed_same_output(self, mini_config, rng):
        x = Tensor(rng.standard_normal((1, 1, 16, 16)))
        first = build_model(mini_config, seed=4).eval()
        second = build_model(mini_config, seed=4).eval()
        with no_grad():
            np.testing.assert_array_equal(first(x).data, second(x).data)

    def test_skip_path_survives_dead_bottleneck(self, mini_config, rng):
        model = build_model(mini_config, seed=0).eval()
        model.enc4.forward = lambda x: Tensor(np.zeros((x.shape[0], 64) + x.shape[2:]))
        with no_grad():
            a = model(Tensor(rng.standard_normal((1, 1, 16, 16)))).data
            b = model(Tensor(rng.standard_normal((1, 1, 16, 16)))).data
        assert a.shape == (1, 1, 16, 16)
        assert not np.array_equal(a, b)

    def test_encoder_fields(self):
        fields = SegmentationNet(ModelConfig()).operation_fields()
        names = [field.name for field in fields]
        assert names == ['enc1', 'enc2', 'enc3', 'enc4', 'dec3', 'dec2', 'dec1']
        assert fields[0].local.branches == (3, 7, 15, 31, 63)
        assert fields[0].absolute == 63
        absolutes = [field.absolute for field in fields[:4]]
        assert absolutes == sorted(absolutes)
        assert all(field.absolute is None for field in fields[4:])

    @pytest.mark.parametrize('arch', ['sdu', 'unet'])
    def test_whole_model_gradient(self, arch):
        with wide_precision():
            cfg = ModelConfig(widths=(8, 16, 32, 64), block_kind=arch, channel_rounding='floor')
            model = build_model(cfg, seed=1).eval()
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((1, 1, 8, 8)), requires_grad=True)
            weights = Tensor(rng.standard_normal((1, 1, 8, 8)))
            error = gradcheck(lambda: (model(x) * weights).sum(), [x], step=1e-5)
        assert error < 1e-3


class TestParameterTotals:
    def test_default_totals_without_norm(self):
        sdu = count_parameters(SegmentationNet(ModelConfig(use_norm=False)))
        unet = count_parameters(SegmentationNet(ModelConfig(use_norm=False, block_kind='unet')))
        assert sdu.total == 3_755_137
        assert unet.total == 8_556_353
        assert 0.30 <= sdu.total / unet.total <= 0.50

    def test_ratio_and_norm_split(self):
        sdu_model = SegmentationNet(ModelConfig())
        report = count_parameters(sdu_model, compare_with=SegmentationNet(ModelConfig(block_kind='unet')))
        assert report.label == 'sdu'
        assert report.ratio_vs['label'] == 'unet'
        assert 0.30 <= report.ratio_vs['ratio'] <= 0.50
        assert report.total_without_norm == 3_755_137
        assert report.total > report.total_without_norm

    def test_miniature_ratio(self, mini_config):
        sdu = count_parameters(SegmentationNet(mini_config)).total
        unet = count_parameters(SegmentationNet(ModelConfig(widths=(8, 16, 32, 64), block_kind='unet'))).total
        assert 0.30 <= sdu / unet <= 0.50

    @pytest.mark.parametrize('arch', ['sdu', 'unet'])
    def test_totals_grow_with_widths(self, arch):
        ladder = [(16, 32, 64, 128), (16, 32, 64, 144), (32, 64, 128, 256), (48, 96, 192, 384), (64, 128, 256, 512)]
        configs = [ModelConfig(widths=w, block_kind=arch, channel_rounding='floor') for w in ladder]
        totals = [count_parameters(SegmentationNet(cfg)).total for cfg in configs]
        assert all(b > a for a, b in zip(totals, totals[1:])), totals

    def test_reference_comparison(self):
        report = count_parameters(SegmentationNet(ModelConfig(use_norm=False)))
        delta = compare_with_reference(report, 'SDU-Net')
        assert delta['reference'] == PUBLISHED_PARAMETERS['SDU-Net'] == 6_028_833
        assert delta['delta'] == 3_755_137 - 6_028_833

    def test_table_lists_every_tensor(self, mini_config):
        model = SegmentationNet(mini_config)
        report = count_parameters(model)
        frame = report.to_frame()
        assert len(frame) == len(list(model.named_parameters()))
        assert frame['count'].sum() == report.total
        assert 'Total (with norm)' in report.format_table()


class TestPrediction:
    def test_threshold_mask(self):
        probabilities = np.array([0.2, 0.5, 0.7, 1.0])
        np.testing.assert_array_equal(threshold_mask(probabilities, 0.5), [0, 1, 1, 1])
        assert not threshold_mask(probabilities * 0.99, 1.0).any()

    def test_threshold_one_is_empty_for_saturated_logits(self):
        probabilities = F.sigmoid(Tensor([[20.0, 120.0], [-20.0, -120.0]])).data
        assert not threshold_mask(probabilities, 1.0).any()
        np.testing.assert_array_equal(threshold_mask(probabilities, 0.5), [[1, 1], [0, 0]])

    def test_threshold_is_idempotent(self):
        mask = threshold_mask(np.random.default_rng(0).random((4, 4)))
        np.testing.assert_array_equal(threshold_mask(mask), mask)

    def test_predict_needs_inference_mode(self, mini_config):
        model = build_model(mini_config)
        with pytest.raises(SegmentationError, match='eval'):
            predict_mask(model, Tensor(np.zeros((1, 1, 16, 16))))

    def test_predict_mask_shape(self, mini_config, rng):
        model = build_model(mini_config).eval()
        mask = predict_mask(model, Tensor(rng.standard_normal((2, 1, 16, 16))))
        assert mask.shape == (2, 1, 16, 16)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1}

    @pytest.mark.parametrize('size, expected', [(60, 64), (12, 16), (3, 8), (64, 64)])
    def test_round_extent(self, size, expected):
        assert round_extent(size) == expected
