"""Training objectives for both networks and the lambda schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor, as_tensor, clamp, log

LOG_FLOOR = 1e-7
LAMBDA_MODES = ("fixed", "dynamic")
SUPERVISION_MODES = ("dynamic", "adversarial", "none")


@dataclass
class LossConfig:
    lambda_mode: str = "fixed"
    lam: float = 10.0
    supervision_mode: str = "dynamic"
    dice_smoothing: float = 1.0
    perturbation_band: float = 0.01

    def __post_init__(self):
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}")
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ValueError(
                f"supervision_mode must be one of {SUPERVISION_MODES}, got {self.supervision_mode!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 < self.perturbation_band < 0.5:
            raise ValueError(f"perturbation_band must lie in (0, 0.5), got {self.perturbation_band}")

    def to_dict(self) -> dict:
        return asdict(self)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _same_shape(a, b, what: str) -> None:
    if np.shape(_arr(a)) != np.shape(_arr(b)):
        raise ValueError(f"{what}: shape mismatch {np.shape(_arr(a))} vs {np.shape(_arr(b))}")


def dynamic_supervision(y, y_hat) -> np.ndarray:
    """Disagreement target y(1 - y_hat) + (1 - y) y_hat; equals |y - y_hat| for binary y."""
    _same_shape(y, y_hat, "dynamic_supervision")
    y, y_hat = _arr(y), _arr(y_hat)
    return y * (1 - y_hat) + (1 - y) * y_hat


def bce_map(p: Tensor, target) -> Tensor:
    """Per-pixel binary cross-entropy against a continuous target, logs floored at 1e-7."""
    t = as_tensor(target)
    pos = log(clamp(p, LOG_FLOOR, None))
    neg = log(clamp(1.0 - p, LOG_FLOOR, None))
    return -(t * pos) - (1.0 - t) * neg


def bce(p: Tensor, target) -> Tensor:
    return bce_map(p, target).mean()


def _check_target(t, name: str) -> None:
    a = _arr(t)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError(f"{name} must lie in [0, 1]")


def confidence_loss(c_ini: Tensor, c_ref: Tensor, yc_ini, yc_ref) -> Tensor:
    for c, t, name in ((c_ini, yc_ini, "yc_ini"), (c_ref, yc_ref, "yc_ref")):
        _same_shape(c, t, "confidence_loss")
        _check_target(t, name)
    return 0.5 * (bce(c_ini, _arr(yc_ini).astype(c_ini.dtype))
                  + bce(c_ref, _arr(yc_ref).astype(c_ref.dtype)))


def confidence_weight(c, lam: float) -> np.ndarray:
    return 1.0 + lam * _arr(c)


def structure_loss(y_hat: Tensor, y, w, smoothing: float = 1.0) -> Tensor:
    """Confidence-weighted BCE (weighted mean) plus weighted soft Dice.

    Sums run over each image's pixels; the result is averaged over the batch.
    """
    _same_shape(y_hat, y, "structure_loss")
    _same_shape(y_hat, w, "structure_loss")
    dtype = y_hat.dtype
    y = Tensor(_arr(y).astype(dtype))
    w = Tensor(_arr(w).astype(dtype))
    axes = tuple(range(1, y_hat.ndim))
    w_sum = w.sum(axis=axes)
    wce = (w * bce_map(y_hat, y)).sum(axis=axes) / w_sum
    inter = (w * y_hat * y).sum(axis=axes)
    union = (w * (y_hat + y)).sum(axis=axes)
    dice = 1.0 - (2.0 * inter + smoothing) / (union + smoothing)
    return (wce + dice).mean()


def perturb_labels(y, band: float, rng: np.random.Generator) -> np.ndarray:
    """Relax binary labels into (0, band) for background and (1 - band, 1) for foreground."""
    y = _arr(y)
    u = rng.integers(1, 2 ** 53, size=y.shape) / 2.0 ** 53   # open interval (0, 1)
    return np.where(y > 0.5, 1.0 - band * u, band * u)


def adversarial_confidence_loss(d_ini: Tensor, d_ref: Tensor, d_gt: Tensor) -> Tensor:
    """Discriminator loss: predictions are labelled 0, perturbed ground truth 1."""
    zeros = np.zeros(d_ini.shape, dtype=d_ini.dtype)
    ones = np.ones(d_gt.shape, dtype=d_gt.dtype)
    return 0.5 * (bce(d_ini, zeros) + bce(d_ref, zeros)) + bce(d_gt, ones)


def adversarial_confidence(d) -> np.ndarray:
    """Uncertainty read off a discriminator as its distance from 0.5, rescaled to [0, 1]."""
    return np.abs(_arr(d) - 0.5) / 0.5


def lambda_schedule(config: LossConfig, epoch: int) -> float:
    if epoch < 1:
        raise ValueError(f"epochs are counted from 1, got {epoch}")
    if config.lambda_mode == "fixed":
        return float(config.lam)
    return float(min(2 * max(epoch - 5, 0), 20))
