"""Finite-difference gradient suite over every differentiable op and network block.

Each case is built at three random shapes in float64 and reduced to a scalar
with a fixed random projection (averaged) so that every output element is exercised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .autograd import Tensor, clamp, log, maximum, precision64, reshape
from .cod import CodConfig, CodNetwork, _res_block, fusion_module, holistic_attention, rcab
from .confidence import ConfConfig, ConfidenceNetwork
from .gradcheck import grad_check_detailed
from .params import NetworkParams

OP_SHAPES = ((1, 1, 4, 4), (2, 3, 4, 6), (2, 2, 6, 4))
BLOCK_WIDTHS = (3, 4, 5)
NETWORK_BATCHES = (2, 3, 2)
# full networks have hundreds of parameter tensors; probe a few coordinates of each
NETWORK_COORDS = 2


@dataclass
class CaseResult:
    name: str
    shape: str
    error: float
    checked: int
    crossings: int
    seconds: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.error < tol and self.checked > 0


class _Projector:
    """Fixed random linear functionals, drawn on first use and reused by every later call.

    The projection is averaged rather than summed so that the loss stays O(1):
    the rounding noise of a central difference grows with |loss|, and
    structurally zero gradients (a conv bias feeding batch norm) would
    otherwise sit right at the relative-error floor.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights: dict[str, Tensor] = {}

    def __call__(self, key: str, t: Tensor) -> Tensor:
        if key not in self.weights:
            self.weights[key] = Tensor(self.rng.normal(size=t.shape))
        return (t * self.weights[key]).mean()


def op_cases(rng: np.random.Generator, shape):
    """(name, builder, params, max_coords) for every differentiable tensor op."""
    n, c, h, w = shape
    x = Tensor(rng.normal(size=shape))
    other = Tensor(rng.normal(size=shape))
    pos = Tensor(rng.uniform(0.5, 2.0, size=shape))
    wt = Tensor(rng.normal(size=(2, c, 3, 3)))
    bias = Tensor(rng.normal(size=2))
    tw = Tensor(rng.normal(size=(c, 2, 2, 2)))
    g, s = Tensor(rng.normal(size=c)), Tensor(rng.normal(size=c))
    rm, rv = np.zeros(c), np.ones(c)
    row = Tensor(rng.normal(size=(1, c, 1, w)))
    proj = _Projector(rng)
    return [
        ("add", lambda: proj("add", x + row), [x, row], None),
        ("sub", lambda: proj("sub", x - row), [x, row], None),
        ("mul", lambda: proj("mul", x * row), [x, row], None),
        ("div", lambda: proj("div", x / pos), [x, pos], None),
        ("log", lambda: proj("log", log(pos)), [pos], None),
        ("clamp", lambda: proj("clamp", clamp(x, -0.5, 0.5)), [x], None),
        ("sum_mean", lambda: proj("sum", x.sum(axis=(2, 3))) + x.mean(), [x], None),
        ("reshape", lambda: proj("rs", reshape(x, (n, c * h * w))), [x], None),
        ("maximum", lambda: proj("max", maximum(x, other)), [x, other], None),
        ("conv2d", lambda: proj("conv", F.conv2d(x, wt, bias, stride=1, pad=1)), [x, wt, bias], None),
        ("conv2d_stride2", lambda: proj("conv2", F.conv2d(x, wt, bias, stride=2, pad=1)),
         [x, wt, bias], None),
        ("conv_transpose2d", lambda: proj("tconv", F.conv_transpose2d(x, tw, bias, 2)), [x, tw, bias], None),
        ("batch_norm", lambda: proj("bn", F.batch_norm(x, g, s, rm, rv, True)), [x, g, s], None),
        ("leaky_relu", lambda: proj("lrelu", F.leaky_relu(x, 0.2)), [x], None),
        ("relu", lambda: proj("relu", F.relu(x)), [x], None),
        ("sigmoid", lambda: proj("sig", F.sigmoid(x)), [x], None),
        ("dropout", lambda: proj("drop", F.dropout(x, 0.5, True, np.random.default_rng(9))), [x], None),
        ("bilinear_resize", lambda: proj("up", F.bilinear_resize(x, 2 * h + 1, w + 3)), [x], None),
        ("max_pool2d", lambda: proj("pool", F.max_pool2d(x, 2)), [x], None),
        ("concat_channels", lambda: proj("cat", F.concat_channels([x, other])), [x, other], None),
        ("gaussian_blur", lambda: proj("blur", F.gaussian_blur(x, 5, 1.5)), [x], None),
        ("global_avg_pool", lambda: proj("gap", F.global_avg_pool(x)), [x], None),
    ]


def _randomize_heads(params: NetworkParams, rng: np.random.Generator) -> None:
    # zero-initialised heads would block every gradient behind them
    for name, t in params.params.items():
        if ".head." in f".{name}" or name.startswith("head."):
            t.data[...] = rng.normal(scale=0.5, size=t.shape)


def block_cases(rng: np.random.Generator, width: int):
    """Network building blocks at channel width ``width``."""
    proj = _Projector(rng)
    p = NetworkParams(int(rng.integers(1 << 31)))
    p.declare_conv_bn("stage", 3, width)
    p.conv("rcab.conv1", width, width, 3)
    p.conv("rcab.conv2", width, width, 3)
    p.conv("rcab.down", width, max(width // 4, 1), 1)
    p.conv("rcab.up", max(width // 4, 1), width, 1)
    for name in ("res.a", "res.b"):
        p.declare_conv_bn(name, width, width)
    from .cod import _declare_fusion
    _declare_fusion(p, "fm", [width, width + 1, width + 2], width + 2, width)
    _randomize_heads(p, rng)
    for t in p.params.values():
        if t.name.endswith(".bias") or t.name.endswith(".beta"):
            t.data[...] = rng.normal(scale=0.1, size=t.shape)

    image = Tensor(rng.normal(size=(2, 3, 8, 8)))
    feat = Tensor(rng.normal(size=(2, width, 8, 8)))
    coarse = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
    levels = [Tensor(rng.normal(size=(2, width + i, 8 >> i, 8 >> i))) for i in range(3)]

    def ps(prefix):
        return [t for n, t in p.params.items() if n.startswith(prefix)]

    cem = ConfidenceNetwork(ConfConfig(widths=(width,) * 5), seed=int(rng.integers(1 << 31)))
    _randomize_heads(cem.params, rng)
    down_in = Tensor(rng.normal(size=(2, width, 8, 8)))
    skip = Tensor(rng.normal(size=(2, width, 8, 8)))
    below = Tensor(rng.normal(size=(2, width, 4, 4)))

    def drop_rng():
        return np.random.default_rng(3)

    return [
        ("conv_bn_act", lambda: proj("stage", p.conv_bn_act("stage", image, True, stride=2)),
         [image, *ps("stage")], None),
        ("rcab", lambda: proj("rcab", rcab(feat, p, "rcab")), [feat, *ps("rcab")], None),
        ("res_block", lambda: proj("res", _res_block(feat, p, "res", True)), [feat, *ps("res")], None),
        ("holistic_attention", lambda: proj("att", holistic_attention(feat, coarse)[0]), [feat, coarse], None),
        ("fusion_module", lambda: proj("fm", fusion_module(levels, levels[-1], p, "fm", True)),
         [*levels, *ps("fm")], 4),
        ("cem_down_block", lambda: proj("down", cem.down_block(down_in, 2, True, drop_rng())),
         [down_in, *[t for n, t in cem.params.params.items() if n.startswith("down2.")]], None),
        ("cem_up_block", lambda: proj("upb", cem.up_block(skip, below, 2, True, drop_rng())),
         [skip, below, *[t for n, t in cem.params.params.items() if n.startswith("up2.")]], 6),
    ]


def network_cases(rng: np.random.Generator, batch: int):
    """Whole networks at reduced widths, every parameter tensor probed at a few coordinates.

    The losses are mean(y_ref) for the detector and mean(c) for the confidence network.
    """
    cod = CodNetwork(CodConfig(image_size=32, widths=(3, 4, 4, 5, 5), fusion_width=3),
                     seed=int(rng.integers(1 << 31)))
    _randomize_heads(cod.params, rng)
    cem = ConfidenceNetwork(ConfConfig(widths=(2, 3, 3, 3, 3)), seed=int(rng.integers(1 << 31)))
    _randomize_heads(cem.params, rng)
    image = Tensor(rng.uniform(0, 1, size=(batch, 3, 32, 32)))
    # at 32 px the deepest batch-norm layers see only a handful of values, which makes the
    # function curved enough to put the eps=1e-3 central difference near the tolerance
    cem_image = Tensor(rng.uniform(0, 1, size=(batch, 3, 64, 64)))
    pred = Tensor(rng.uniform(0.05, 0.95, size=(batch, 1, 64, 64)))

    def cod_loss():
        return cod.forward(image, True).y_ref.mean()

    def cem_loss():
        return cem.forward(cem_image, pred, True, np.random.default_rng(5)).mean()

    return [
        ("cod_network", cod_loss, [image, *cod.params.params.values()], NETWORK_COORDS),
        ("confidence_network", cem_loss, list(cem.params.params.values()), NETWORK_COORDS),
    ]


def run_suite(seed: int = 0, include_networks: bool = True,
              progress: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    results = []
    rng = np.random.default_rng(seed)
    groups = [(op_cases, OP_SHAPES), (block_cases, BLOCK_WIDTHS)]
    if include_networks:
        groups.append((network_cases, NETWORK_BATCHES))
    with precision64():
        for factory, variants in groups:
            for variant in variants:
                for name, builder, params, coords in factory(rng, variant):
                    start = time.perf_counter()
                    out = grad_check_detailed(builder, params, eps=1e-3, max_coords=coords, rng=rng)
                    res = CaseResult(name, str(variant), out.worst, out.checked, out.crossings,
                                     time.perf_counter() - start)
                    results.append(res)
                    if progress is not None:
                        progress(res)
    return results


def summarize(results: list[CaseResult]) -> dict[str, float]:
    """Worst error per case name across its shapes."""
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst
