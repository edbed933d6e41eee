"""UNet confidence estimator producing a per-pixel uncertainty map in (0, 1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import Tensor
from .params import NetworkParams

DROPOUT = 0.5


@dataclass(frozen=True)
class ConfConfig:
    widths: tuple[int, ...] = (8, 16, 32, 32, 32)
    in_channels: int = 4

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError(f"confidence network needs 5 level widths, got {self.widths}")


@dataclass
class ConfidencePair:
    c_ini: Tensor
    c_ref: Tensor


class ConfidenceNetwork:
    """Five down blocks, five up blocks and a 1x1 sigmoid head.

    The deepest up block takes a 2x2 max-pooled copy of the last down
    feature as its ``below`` input so that every up block has the same form.
    The image side must therefore be divisible by 32.
    """

    def __init__(self, config: ConfConfig = ConfConfig(), seed: int = 1):
        self.config = config
        self.params = NetworkParams(seed)
        p = self.params
        w = config.widths
        cin = config.in_channels
        for n in range(1, 6):
            p.declare_conv_bn(f"down{n}.a", cin, w[n - 1])
            p.declare_conv_bn(f"down{n}.b", w[n - 1], w[n - 1])
            cin = w[n - 1]
        below = w[4]
        for n in range(5, 0, -1):
            p.tconv(f"up{n}.tconv", below, w[n - 1], 2)
            p.declare_conv_bn(f"up{n}.a", 2 * w[n - 1], w[n - 1])
            p.declare_conv_bn(f"up{n}.b", w[n - 1], w[n - 1])
            below = w[n - 1]
        p.conv("head", w[0], 1, 1, zero=True)

    def down_block(self, x: Tensor, level: int, training: bool,
                   rng: np.random.Generator | None) -> Tensor:
        if not 1 <= level <= 5:
            raise ValueError(f"down block level must be 1..5, got {level}")
        if level > 1:
            x = F.max_pool2d(x, 2)
        x = self.params.conv_bn_act(f"down{level}.a", x, training)
        x = self.params.conv_bn_act(f"down{level}.b", x, training)
        return F.dropout(x, DROPOUT, training, rng)

    def up_block(self, skip: Tensor, below: Tensor, level: int, training: bool,
                 rng: np.random.Generator | None) -> Tensor:
        up = F.dropout(self.params.apply_tconv(f"up{level}.tconv", below), DROPOUT, training, rng)
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"up block {level}: upsampled {up.shape} does not match skip {skip.shape}")
        x = F.concat_channels([skip, up])
        x = self.params.conv_bn_act(f"up{level}.a", x, training)
        x = self.params.conv_bn_act(f"up{level}.b", x, training)
        return F.dropout(x, DROPOUT, training, rng)

    def forward(self, image: Tensor, prediction: Tensor, training: bool,
                rng: np.random.Generator | None = None) -> Tensor:
        if prediction.shape[1] != 1 or prediction.shape[2:] != image.shape[2:]:
            raise ValueError(f"prediction {prediction.shape} does not match image {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ValueError(f"confidence network needs sides divisible by 32, got {image.shape}")
        x = F.concat_channels([image.detach(), prediction.detach()])
        skips = []
        for level in range(1, 6):
            x = self.down_block(x, level, training, rng)
            skips.append(x)
        x = F.max_pool2d(skips[-1], 2)
        for level in range(5, 0, -1):
            x = self.up_block(skips[level - 1], x, level, training, rng)
        return F.sigmoid(self.params.apply_conv("head", x))

    __call__ = forward
