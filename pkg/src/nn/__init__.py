from src.nn.blocks import (
    DoubleConvBlock,
    SduBlock,
    SduBlockConfig,
    double_conv_block,
    sdu_block,
)
from src.nn.init import kaiming_init
from src.nn.layers import BatchNorm2d, Conv2d, ConvNormAct, Layer
from src.nn.receptive_field import ReceptiveField, measure_receptive_field, receptive_field
