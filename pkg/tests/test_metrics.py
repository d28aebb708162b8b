import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammaln

from src.autodiff.gradcheck import gradcheck
from src.autodiff.tensor import Tensor
from src.metrics.losses import bi_dice_loss, bi_dice_per_class
from src.metrics.scores import dice_per_class, dice_score, summarize
from src.metrics.stats import ScoreSample, paired_t_test
from src.utils.errors import ShapeError

TRUTH = np.array([[1.0, 1.0], [0.0, 0.0]])


def student_t_density(x: float, df: int) -> float:
    log_norm = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi)
    return float(np.exp(log_norm - (df + 1) / 2 * np.log1p(x * x / df)))


class TestBiDiceLoss:
    def test_perfect_prediction(self):
        assert bi_dice_loss(Tensor(TRUTH), TRUTH).item() == pytest.approx(0.0, abs=1e-6)

    def test_inverted_prediction(self):
        assert bi_dice_loss(Tensor(1 - TRUTH), TRUTH).item() == pytest.approx(1.6, abs=1e-6)

    def test_uninformative_prediction(self):
        assert bi_dice_loss(Tensor(np.full((2, 2), 0.5)), TRUTH).item() == pytest.approx(0.8, abs=1e-6)

    def test_symmetric_in_foreground_and_background(self, rng):
        truth = (rng.random((6, 6)) > 0.5).astype(float)
        q = rng.random((6, 6))
        forward = bi_dice_loss(Tensor(q), truth).item()
        swapped = bi_dice_loss(Tensor(1 - q), 1 - truth).item()
        assert forward == pytest.approx(swapped, rel=1e-5)

    def test_bounds(self, rng):
        for index in range(1000):
            kind = index % 4
            if kind == 0:
                truth = np.zeros((5, 5))
            elif kind == 1:
                truth = np.ones((5, 5))
            elif kind == 2:
                truth = np.zeros((5, 5))
                truth[tuple(rng.integers(0, 5, size=2))] = 1.0
            else:
                truth = (rng.random((5, 5)) > 0.6).astype(float)
            q = rng.random((5, 5))
            if index % 10 == 0:
                q = 1.0 - truth
            value = bi_dice_loss(Tensor(q), truth).item()
            assert 0.0 <= value < 2.0, (index, value)

    def test_batch_averages_and_classes_sum(self, rng):
        truth = (rng.random((2, 3, 4, 4)) > 0.5).astype(float)
        q = rng.random((2, 3, 4, 4))
        expected = bi_dice_per_class(q, truth).sum(axis=1).mean()
        assert bi_dice_loss(Tensor(q, dtype=np.float64), truth).item() == pytest.approx(expected, rel=1e-10)

    def test_rejects_invalid_inputs(self):
        with pytest.raises(ShapeError):
            bi_dice_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))
        with pytest.raises(ValueError, match='binary'):
            bi_dice_loss(Tensor(np.zeros((2, 2))), np.full((2, 2), 0.5))
        with pytest.raises(ValueError, match=r'\[0, 1\]'):
            bi_dice_loss(Tensor(np.full((2, 2), 1.5)), TRUTH)
        with pytest.raises(ValueError, match='smoothing'):
            bi_dice_loss(Tensor(TRUTH), TRUTH, eps=0.0)

    @pytest.mark.parametrize('seed', range(20))
    def test_gradient(self, seed, wide):
        rng = np.random.default_rng(seed)
        truth = (rng.random((1, 2, 4, 4)) > 0.5).astype(float)
        q = Tensor(rng.uniform(0.05, 0.95, size=(1, 2, 4, 4)), requires_grad=True)
        assert gradcheck(lambda: bi_dice_loss(q, truth), [q]) < 1e-4


class TestDice:
    def test_half_overlap(self):
        truth = np.zeros((4, 4), dtype=np.uint8)
        predicted = np.zeros((4, 4), dtype=np.uint8)
        truth[0, :4] = 1
        predicted[0, 2:] = 1
        predicted[1, :2] = 1
        assert dice_score(truth, predicted) == pytest.approx(0.5)

    def test_both_empty_is_perfect(self):
        assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_empty_prediction_scores_zero(self):
        assert dice_score(np.ones((3, 3)), np.zeros((3, 3))) == 0.0

    def test_symmetric(self, rng):
        a = rng.random((8, 8)) > 0.5
        b = rng.random((8, 8)) > 0.3
        assert dice_score(a, b) == dice_score(b, a)

    def test_per_class(self):
        truth = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
        assert dice_per_class(truth, truth) == [1.0, 1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSummarize:
    def test_two_values(self):
        summary = summarize([0.7, 0.9])
        assert summary.mean == pytest.approx(0.8)
        assert summary.std == pytest.approx(0.141421, abs=1e-6)
        assert str(summary) == '0.800000 ± 0.141421'

    def test_single_value_has_zero_spread(self):
        summary = summarize([0.42])
        assert (summary.mean, summary.std, summary.n) == (0.42, 0.0, 1)

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])


class TestPairedTTest:
    DIFFERENCES = (0.05, 0.02, 0.04, 0.01, 0.03)

    def test_known_statistic(self):
        result = paired_t_test(ScoreSample.from_differences(self.DIFFERENCES))
        assert result.t == pytest.approx(3 * np.sqrt(2), rel=1e-9)
        assert result.degrees_of_freedom == 4
        assert result.two_sided_p == pytest.approx(0.0132, abs=5e-4)

    def test_p_matches_integrated_density(self):
        result = paired_t_test(ScoreSample.from_differences(self.DIFFERENCES))
        tail, _ = quad(student_t_density, result.t, np.inf, args=(4,))
        assert result.two_sided_p == pytest.approx(2 * tail, rel=1e-6)

    def test_sign_flips_with_order(self, rng):
        first, second = rng.random(8), rng.random(8)
        forward = paired_t_test(ScoreSample(first, second))
        reverse = paired_t_test(ScoreSample(second, first))
        assert forward.t == pytest.approx(-reverse.t)
        assert forward.two_sided_p == pytest.approx(reverse.two_sided_p)

    def test_balanced_differences(self):
        result = paired_t_test(ScoreSample.from_differences([0.1, -0.1]))
        assert result.t == 0.0
        assert result.two_sided_p == pytest.approx(1.0)

    def test_identical_scores_are_degenerate(self):
        result = paired_t_test(ScoreSample([0.8, 0.9, 0.7], [0.8, 0.9, 0.7], pairing='fold'))
        assert result.degenerate
        assert result.t is None
        assert 'degenerate' in result.describe()

    def test_constant_shift_is_degenerate(self):
        result = paired_t_test(ScoreSample([0.3, 0.4, 0.5], [0.2, 0.3, 0.4]))
        assert result.degenerate
        assert result.two_sided_p is None
        assert result.mean_difference == pytest.approx(0.1)

    def test_needs_two_pairs(self):
        with pytest.raises(ShapeError):
            paired_t_test(ScoreSample([0.5], [0.4]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ScoreSample([0.5, 0.6], [0.4])
