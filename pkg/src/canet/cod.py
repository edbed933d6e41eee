"""Camouflaged object detection network: encoder, fusion heads and attention refinement."""

from __future__ import annotations

from dataclasses import dataclass

from . import functional as F
from .autograd import Tensor, clamp, maximum
from .params import NetworkParams

LOGIT_LIMIT = 15.0


@dataclass(frozen=True)
class CodConfig:
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    fusion_width: int = 32
    blur_size: int = 5
    blur_sigma: float = 1.5
    refine: bool = True

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError(f"encoder needs 5 stage widths, got {self.widths}")
        if self.image_size % 16:
            raise ValueError(f"image size {self.image_size} is not divisible by 16")


@dataclass
class EncoderFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f5: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4, self.f5]


@dataclass
class CodOutputs:
    y_ini: Tensor
    y_ref: Tensor
    coarse: Tensor   # sigmoid of the initial head at F3 resolution
    attention: Tensor | None = None


def rcab(x: Tensor, params: NetworkParams, name: str) -> Tensor:
    """Residual channel-attention block: x + CA(conv(relu(conv(x))))."""
    y = params.apply_conv(f"{name}.conv1", x)
    y = params.apply_conv(f"{name}.conv2", F.relu(y))
    gate = F.global_avg_pool(y)
    gate = F.relu(params.apply_conv(f"{name}.down", gate))
    gate = F.sigmoid(params.apply_conv(f"{name}.up", gate))
    return x + y * gate


def _declare_rcab(params: NetworkParams, name: str, width: int, reduction: int = 4) -> None:
    params.conv(f"{name}.conv1", width, width, 3)
    params.conv(f"{name}.conv2", width, width, 3)
    params.conv(f"{name}.down", width, max(width // reduction, 1), 1)
    params.conv(f"{name}.up", max(width // reduction, 1), width, 1)


def _declare_fusion(params: NetworkParams, name: str, level_widths: list[int], top_width: int,
                    width: int) -> None:
    acc_width = level_widths[-1]
    for j in range(len(level_widths) - 2, -1, -1):
        stage = f"{name}.stage{j}"
        params.conv(f"{stage}.acc", acc_width, width, 1)
        params.conv(f"{stage}.top", top_width, width, 1)
        params.conv(f"{stage}.lat", level_widths[j], width, 1)
        params.declare_conv_bn(f"{stage}.fuse", 3 * width, width)
        _declare_rcab(params, f"{stage}.rcab", width)
        acc_width = width
    params.conv(f"{name}.head", acc_width, 1, 1, zero=True)


def fusion_module(features: list[Tensor], top: Tensor, params: NetworkParams, name: str,
                  training: bool) -> Tensor:
    """Progressively fuse high-level features into lower ones; returns 1-channel logits.

    ``features`` is ordered low -> high.  The accumulator starts at the
    highest feature and the ``top`` feature is re-injected at every level.
    """
    if not features:
        raise ValueError("fusion_module needs at least one feature map")
    acc = features[-1]
    for j in range(len(features) - 2, -1, -1):
        stage = f"{name}.stage{j}"
        level = features[j]
        h, w = level.shape[2:]
        a = params.apply_conv(f"{stage}.acc", F.bilinear_resize(acc, h, w))
        t = params.apply_conv(f"{stage}.top", F.bilinear_resize(top, h, w))
        lat = params.apply_conv(f"{stage}.lat", level)
        z = params.conv_bn_act(f"{stage}.fuse", F.concat_channels([a, t, lat]), training)
        acc = rcab(z, params, f"{stage}.rcab")
    return params.apply_conv(f"{name}.head", acc)


def holistic_attention(f3: Tensor, coarse: Tensor, size: int = 5, sigma: float = 1.5
                       ) -> tuple[Tensor, Tensor]:
    """Gate ``f3`` with max(blur(coarse), coarse); returns (F6, attention map)."""
    if f3.shape[2:] != coarse.shape[2:] or f3.shape[0] != coarse.shape[0]:
        raise ValueError(f"holistic_attention size mismatch: {f3.shape} vs {coarse.shape}")
    att = maximum(F.gaussian_blur(coarse, size, sigma), coarse)
    return f3 * att, att


def _res_block(x: Tensor, params: NetworkParams, name: str, training: bool) -> Tensor:
    y = params.conv_bn_act(f"{name}.a", x, training)
    y = params.apply_bn(f"{name}.b.bn", params.apply_conv(f"{name}.b.conv", y), training)
    return x + y


class CodNetwork:
    """Parameter table plus forward pass of the detection network."""

    def __init__(self, config: CodConfig = CodConfig(), seed: int = 0):
        self.config = config
        self.params = NetworkParams(seed)
        p = self.params
        w = config.widths
        cin = 3
        for i, cout in enumerate(w, start=1):
            p.declare_conv_bn(f"enc{i}.a", cin, cout)
            p.declare_conv_bn(f"enc{i}.b", cout, cout)
            cin = cout
        fw = config.fusion_width
        _declare_fusion(p, "fm_ini", [w[2], w[3], w[4]], w[4], fw)
        for name in ("res7", "res8"):
            p.declare_conv_bn(f"{name}.a", w[2], w[2])
            p.declare_conv_bn(f"{name}.b", w[2], w[2])
        _declare_fusion(p, "fm_ref", [w[1], w[2], w[2], w[2]], w[2], fw)

    def encoder(self, image: Tensor, training: bool) -> EncoderFeatures:
        size = self.config.image_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (size, size):
            raise ValueError(f"expected an N x 3 x {size} x {size} image, got {image.shape}")
        feats = []
        x = image
        for i in range(1, 6):
            x = self.params.conv_bn_act(f"enc{i}.a", x, training, stride=1 if i == 1 else 2)
            x = self.params.conv_bn_act(f"enc{i}.b", x, training)
            feats.append(x)
        return EncoderFeatures(*feats)

    def forward(self, image: Tensor, training: bool) -> CodOutputs:
        cfg = self.config
        p = self.params
        h, w = image.shape[2:]
        f = self.encoder(image, training)
        ini_logits = clamp(fusion_module([f.f3, f.f4, f.f5], f.f5, p, "fm_ini", training),
                           -LOGIT_LIMIT, LOGIT_LIMIT)
        coarse = F.sigmoid(ini_logits)
        y_ini = F.sigmoid(F.bilinear_resize(ini_logits, h, w))
        if not cfg.refine:
            return CodOutputs(y_ini, y_ini, coarse)
        f6, att = holistic_attention(f.f3, coarse, cfg.blur_size, cfg.blur_sigma)
        f7 = _res_block(f6, p, "res7", training)
        f8 = _res_block(f7, p, "res8", training)
        ref_logits = clamp(fusion_module([f.f2, f6, f7, f8], f8, p, "fm_ref", training),
                           -LOGIT_LIMIT, LOGIT_LIMIT)
        y_ref = F.sigmoid(F.bilinear_resize(ref_logits, h, w))
        return CodOutputs(y_ini, y_ref, coarse, att)

    __call__ = forward
