"""Colorizer networks: learned grayscale-to-RGB front-ends.

Three interchangeable architectures map [N,1,H,W] to [N,3,H,W]:

* ``deconv`` - residual trunk at 1/4 resolution, one transpose conv back up.
* ``pixelshuffle`` - same trunk, conv to 3*r^2 channels then pixel shuffle.
* ``coloru`` - encoder/decoder built from strided convolutions only, about
  a third of the parameters of the other two at full scale.

Outputs are unclamped; downstream consumers normalize anyway.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import ShapeMismatch, Tensor, Variable
from .layers import (
    BatchNorm2d,
    Conv2d,
    Conv2dSpec,
    ConvTranspose2d,
    LeakyReLU,
    MaxPool2d,
    Module,
    PixelShuffle,
    ResidualBlock,
    Sequential,
)

__all__ = [
    "ColorizerKind",
    "ColorizerConfig",
    "desk_config",
    "full_scale_config",
    "build_colorizer",
    "colorize",
]

LEAKY_SLOPE = 0.01


class ColorizerKind(str, Enum):
    DECONV = "deconv"
    PIXEL_SHUFFLE = "pixelshuffle"
    COLOR_U = "coloru"


@dataclass(frozen=True)
class ColorizerConfig:
    """Width/depth knobs shared by all three architectures.

    ``stem_channels``/``n_res_blocks`` size the residual trunk used by
    deconv and pixelshuffle; ``coloru_channels`` are the per-stage widths
    of the coloru downsampling path (the upsampling path mirrors them).
    """

    stem_channels: int = 16
    n_res_blocks: int = 2
    upscale: int = 4
    coloru_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        if self.stem_channels < 1 or self.n_res_blocks < 1:
            raise ValueError(f"colorizer config must have positive sizes: {self}")
        if self.upscale != 4:
            raise ValueError(f"trunk colorizers downsample 4x, so upscale must be 4, got {self.upscale}")
        if len(self.coloru_channels) != 3 or min(self.coloru_channels) < 1:
            raise ValueError(f"coloru_channels must be three positive widths: {self}")


def desk_config():
    """Small configuration for 32x32 experiments."""
    return ColorizerConfig(stem_channels=16, n_res_blocks=2, coloru_channels=(12, 24, 48))


def full_scale_config():
    """Full-size configuration (320x320 inputs, 64-channel trunk)."""
    return ColorizerConfig(stem_channels=64, n_res_blocks=8)


def _trunk(cfg, rng):
    """Shared front: conv7 stride 2 -> BN -> ReLU -> maxpool 2 -> residual blocks.

    Spatially this is a 4x downsample: [N,1,H,W] -> [N,stem,H/4,W/4].
    """
    layers = [
        Conv2d(Conv2dSpec(1, cfg.stem_channels, kernel=7, stride=2, padding=3, bias=False), rng),
        BatchNorm2d(cfg.stem_channels),
        LeakyReLU(0.0),
        MaxPool2d(2),
    ]
    blocks = [ResidualBlock(cfg.stem_channels, rng) for _ in range(cfg.n_res_blocks)]
    return layers, blocks


class _TrunkColorizer(Module):
    """Deconv/pixelshuffle body; subclasses supply the upsampler layers."""

    def __init__(self, cfg, rng, kind):
        super().__init__()
        self.kind = kind
        self.config = cfg
        stem_layers, blocks = _trunk(cfg, rng)
        self.stem = Sequential(stem_layers, label=f"{kind.value}.stem")
        self.blocks = Sequential(blocks, label=f"{kind.value}.blocks")
        self.upsampler = Sequential(self._build_upsampler(cfg, rng), label=f"{kind.value}.upsampler")

    def _build_upsampler(self, cfg, rng):
        raise NotImplementedError

    def forward(self, x):
        _check_gray(x)
        _check_divisible(x, 4)
        return self.upsampler(self.blocks(self.stem(x)))


class DeconvColorizer(_TrunkColorizer):
    def __init__(self, cfg, rng):
        super().__init__(cfg, rng, ColorizerKind.DECONV)

    def _build_upsampler(self, cfg, rng):
        spec = Conv2dSpec(cfg.stem_channels, 3, kernel=cfg.upscale, stride=cfg.upscale, padding=0)
        return [ConvTranspose2d(spec, rng)]


class PixelShuffleColorizer(_TrunkColorizer):
    def __init__(self, cfg, rng):
        super().__init__(cfg, rng, ColorizerKind.PIXEL_SHUFFLE)

    def _build_upsampler(self, cfg, rng):
        r = cfg.upscale
        spec = Conv2dSpec(cfg.stem_channels, 3 * r * r, kernel=3, stride=1, padding=1)
        return [Conv2d(spec, rng), PixelShuffle(r)]


class ColorDown(Module):
    """conv3x3 (changes width) -> conv4x4 stride 2 (keeps width) -> BN.

    Leaky activations sit before the BN, matching the rest of the
    coloru family.
    """

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.body = Sequential(
            [
                Conv2d(Conv2dSpec(c_in, c_out, kernel=3, stride=1, padding=1), rng),
                LeakyReLU(LEAKY_SLOPE),
                Conv2d(Conv2dSpec(c_out, c_out, kernel=4, stride=2, padding=1), rng),
                LeakyReLU(LEAKY_SLOPE),
                BatchNorm2d(c_out),
            ],
            label="colordown",
        )

    def forward(self, x):
        return self.body(x)


class ColorUp(Module):
    """convT4x4 stride 2 (keeps width) -> two conv3x3 -> BN."""

    def __init__(self, c_in, c_out, rng, final=False):
        super().__init__()
        mid = c_in if final else c_out
        stack = [
            ConvTranspose2d(Conv2dSpec(c_in, c_in, kernel=4, stride=2, padding=1), rng),
            LeakyReLU(LEAKY_SLOPE),
            Conv2d(Conv2dSpec(c_in, mid, kernel=3, stride=1, padding=1), rng),
            LeakyReLU(LEAKY_SLOPE),
            Conv2d(Conv2dSpec(mid, c_out, kernel=3, stride=1, padding=1), rng),
        ]
        if not final:
            # The output block ends on its conv: the image layer gets no
            # activation and no BN.
            stack.append(LeakyReLU(LEAKY_SLOPE))
            stack.append(BatchNorm2d(c_out))
        self.body = Sequential(stack, label="colorout" if final else "colorup")

    def forward(self, x):
        return self.body(x)


class ColorUColorizer(Module):
    """Strided encoder/decoder colorizer; no pooling layers anywhere."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.kind = ColorizerKind.COLOR_U
        self.config = cfg
        c1, c2, c3 = cfg.coloru_channels
        self.down = Sequential(
            [ColorDown(1, c1, rng), ColorDown(c1, c2, rng), ColorDown(c2, c3, rng)],
            label="coloru.down",
        )
        self.up = Sequential(
            [ColorUp(c3, c2, rng), ColorUp(c2, c1, rng)],
            label="coloru.up",
        )
        self.out = ColorUp(c1, 3, rng, final=True)

    def forward(self, x):
        _check_gray(x)
        _check_divisible(x, 8)
        return self.out(self.up(self.down(x)))


def _check_gray(x):
    shape = tuple(x.shape)
    if len(shape) != 4 or shape[1] != 1:
        raise ShapeMismatch("colorizer input must be [N,1,H,W]", shape, ("N", 1, "H", "W"))


def _check_divisible(x, d):
    _, _, h, w = x.shape
    if h % d or w % d:
        raise ShapeMismatch(
            f"colorizer input spatial dims must divide by {d}", tuple(x.shape), (d, d)
        )


_BUILDERS = {
    ColorizerKind.DECONV: DeconvColorizer,
    ColorizerKind.PIXEL_SHUFFLE: PixelShuffleColorizer,
    ColorizerKind.COLOR_U: ColorUColorizer,
}


def build_colorizer(kind, config, rng):
    """Construct a colorizer network of the given kind."""
    kind = ColorizerKind(kind)
    return _BUILDERS[kind](config, rng)


def colorize(net, batch):
    """Apply a colorizer to a grayscale array batch: [N,1,H,W] -> [N,3,H,W]."""
    _check_gray(batch)
    return net(Variable(Tensor(np.asarray(batch)))).value.data
