from src.autodiff.functional import (
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    div,
    maxpool2d,
    mean,
    mul,
    neg,
    relu,
    sigmoid,
    slice_channels,
    split_channels,
    sub,
    tensor_sum,
    upsample2x,
)
from src.autodiff.kernels import ConvSpec, conv2d_reference, conv_output_extent
from src.autodiff.tensor import Tape, Tensor, backward, get_tape, no_grad, wide_precision
