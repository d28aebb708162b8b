from src.metrics.losses import bi_dice_loss, bi_dice_per_class
from src.metrics.scores import Summary, dice_per_class, dice_score, summarize
from src.metrics.stats import ScoreSample, TTestResult, paired_t_test
