from src.models.config import ModelConfig
from src.models.parameters import (
    PUBLISHED_PARAMETERS,
    ParameterReport,
    compare_with_reference,
    count_parameters,
)
from src.models.segnet import SegmentationNet, build_model, predict_mask, threshold_mask
