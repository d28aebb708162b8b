# Four-level encoder/decoder segmentation network.
#
#   enc1(n1) ─────────────────────────────── concat ─ dec1(n1) ─ head
#     pool                                     up1
#   enc2(n2) ─────────────────── concat ─ dec2(n2)
#     pool                         up2
#   enc3(n3) ─────── concat ─ dec3(n3)
#     pool             up3
#   enc4(n4) ──────────┘
#
# Each up step is upsample2x followed by a 3x3 conv halving the channels, so the
# concat input equals twice the skip width. The head is a 1x1 conv + sigmoid per class.

import logging
from typing import List

import numpy as np

from src.autodiff import functional as F
from src.autodiff.tensor import Tensor, no_grad
from src.models.config import ModelConfig
from src.nn.blocks import DoubleConvBlock, SduBlock, SduBlockConfig
from src.nn.init import kaiming_init
from src.nn.layers import Conv2d, ConvNormAct, Layer
from src.nn.receptive_field import OperationField, ReceptiveField
from src.utils.errors import SegmentationError, ShapeError

logger = logging.getLogger(__name__)

DEPTH_FACTOR = 8


def make_block(cfg: ModelConfig, n_in: int, n_out: int) -> Layer:
    """Build one encoder/decoder operation of the configured kind."""
    if cfg.block_kind == 'double_conv':
        return DoubleConvBlock(n_in, n_out, cfg.use_norm)
    block_cfg = SduBlockConfig(
        n_in=n_in,
        n_out=n_out,
        split_fractions=cfg.split_fractions,
        dilation_rates=cfg.dilation_rates,
        use_norm=cfg.use_norm,
        stem=cfg.sdu_stem,
        rounding=cfg.channel_rounding,
    )
    return SduBlock(block_cfg)


class UpConv(Layer):
    """upsample2x, then a 3x3 conv (with optional norm) + ReLU."""

    def __init__(self, n_in: int, n_out: int, mode: str, use_norm: bool):
        super().__init__()
        self.mode = mode
        self.conv = self.add_child('conv', ConvNormAct(n_in, n_out, 1, use_norm))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.upsample2x(x, self.mode))


class SegmentationNet(Layer):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n1, n2, n3, n4 = cfg.widths

        self.enc1 = self.add_child('enc1', make_block(cfg, cfg.in_channels, n1))
        self.enc2 = self.add_child('enc2', make_block(cfg, n1, n2))
        self.enc3 = self.add_child('enc3', make_block(cfg, n2, n3))
        self.enc4 = self.add_child('enc4', make_block(cfg, n3, n4))

        self.up3 = self.add_child('up3', UpConv(n4, n3, cfg.upsample_mode, cfg.use_norm))
        self.dec3 = self.add_child('dec3', make_block(cfg, 2 * n3, n3))
        self.up2 = self.add_child('up2', UpConv(n3, n2, cfg.upsample_mode, cfg.use_norm))
        self.dec2 = self.add_child('dec2', make_block(cfg, 2 * n2, n2))
        self.up1 = self.add_child('up1', UpConv(n2, n1, cfg.upsample_mode, cfg.use_norm))
        self.dec1 = self.add_child('dec1', make_block(cfg, 2 * n1, n1))

        self.head = self.add_child('head', Conv2d(n1, cfg.out_channels, kernel_size=1))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"Model input must be 4-D (n, c, h, w), got shape {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"Model channel axis mismatch: expected {self.cfg.in_channels} channels, got {x.shape[1]}"
            )
        h, w = x.shape[2:]
        if h % DEPTH_FACTOR or w % DEPTH_FACTOR:
            raise ShapeError(
                f"Input height and width must be divisible by {DEPTH_FACTOR}, got {h}x{w}; "
                f"resize to {round_extent(h)}x{round_extent(w)}"
            )

        e1 = self.enc1(x)
        e2 = self.enc2(F.maxpool2d(e1))
        e3 = self.enc3(F.maxpool2d(e2))
        e4 = self.enc4(F.maxpool2d(e3))

        d3 = self.dec3(F.concat_channels([e3, self.up3(e4)]))
        d2 = self.dec2(F.concat_channels([e2, self.up2(d3)]))
        d1 = self.dec1(F.concat_channels([e1, self.up1(d2)]))
        return F.sigmoid(self.head(d1))

    def operation_fields(self) -> List[OperationField]:
        """Receptive fields per encoder/decoder operation.

        ``local`` is measured in pixels of the operation's own resolution;
        ``absolute`` composes the encoder path back to input pixels.
        """
        rows = []
        extent, jump = 1, 1
        for level, name in enumerate(('enc1', 'enc2', 'enc3', 'enc4'), start=1):
            block = self._children[name]
            local, _ = block.trace_receptive_field(1, 1)
            extents, _ = block.trace_receptive_field(extent, jump)
            rows.append(OperationField(name, level, ReceptiveField(tuple(local)), max(extents)))
            # 2x2 max pooling: grows by (2 - 1) * jump and doubles the jump
            extent = max(extents) + jump
            jump *= 2
        for level, name in ((3, 'dec3'), (2, 'dec2'), (1, 'dec1')):
            local, _ = self._children[name].trace_receptive_field(1, 1)
            rows.append(OperationField(name, level, ReceptiveField(tuple(local)), None))
        return rows


def round_extent(size: int) -> int:
    """Nearest positive multiple of the depth factor."""
    return max(DEPTH_FACTOR, int(round(size / DEPTH_FACTOR)) * DEPTH_FACTOR)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegmentationNet:
    model = SegmentationNet(cfg)
    kaiming_init(model, seed)
    logger.debug(f"Built {cfg.arch} model with widths {cfg.widths} (seed {seed})")
    return model


def predict_mask(model: Layer, image: Tensor, threshold: float = 0.5) -> np.ndarray:
    """Binary mask per class: probability >= threshold. Returns uint8 (n, classes, h, w)."""
    if model.training:
        raise SegmentationError("predict_mask needs a model in inference mode; call model.eval() first")
    h, w = image.shape[2:]
    if h % DEPTH_FACTOR or w % DEPTH_FACTOR:
        raise ShapeError(
            f"Image extents {h}x{w} are not divisible by {DEPTH_FACTOR}; "
            f"resize to {round_extent(h)}x{round_extent(w)} first"
        )
    with no_grad():
        probabilities = model(image)
    return threshold_mask(probabilities.data, threshold)


def threshold_mask(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)
