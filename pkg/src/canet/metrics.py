"""MAE, mean F-measure, mean E-measure and S-measure for binary segmentation maps.

Every function accepts a single ``(H, W)`` map or a stack ``(..., H, W)`` and
returns a float or an array over the leading axes.  Arithmetic is float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm

BETA2 = 0.3
EPS = 1e-8
N_LEVELS = 256
METRIC_NAMES = ("mae", "mean_f", "mean_e", "s_measure")


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    if pred.ndim < 2:
        raise ValueError(f"metrics need at least 2-D maps, got shape {pred.shape}")
    return pred, (gt > 0.5).astype(np.float64)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def mae(pred, gt):
    pred, gt = _prepare(pred, gt)
    return _scalar(np.abs(pred - gt).mean(axis=(-2, -1)))


def _threshold_counts(pred: np.ndarray, gt: np.ndarray):
    """Per-threshold predicted-positive and true-positive counts for t_k = k/256, k=1..255.

    A pixel passes threshold k iff k <= floor(256 * p), so one histogram of
    these levels per image gives every threshold at once.
    """
    lead = pred.shape[:-2]
    n_img = int(np.prod(lead, dtype=int))
    level = np.clip(np.floor(pred * N_LEVELS), 0, N_LEVELS - 1).astype(np.int64).reshape(n_img, -1)
    offset = (np.arange(n_img) * N_LEVELS)[:, None]
    flat = (level + offset).ravel()
    size = n_img * N_LEVELS
    hist_all = np.bincount(flat, minlength=size).reshape(n_img, N_LEVELS)
    hist_fg = np.bincount(flat, weights=gt.reshape(n_img, -1).ravel(), minlength=size)
    hist_fg = hist_fg.reshape(n_img, N_LEVELS)
    # reverse cumulative sums: count of pixels with level >= k, then drop k = 0
    pp = np.cumsum(hist_all[:, ::-1], axis=1)[:, ::-1][:, 1:].astype(np.float64)
    tp = np.cumsum(hist_fg[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return pp.reshape(*lead, N_LEVELS - 1), tp.reshape(*lead, N_LEVELS - 1)


def mean_fbeta(pred, gt):
    pred, gt = _prepare(pred, gt)
    pp, tp = _threshold_counts(pred, gt)
    g = gt.sum(axis=(-2, -1))[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pp > 0, tp / pp, 0.0)
        recall = np.where(g > 0, tp / g, 0.0)
        denom = BETA2 * precision + recall
        f = np.where(denom > 0, (1 + BETA2) * precision * recall / denom, 0.0)
    return _scalar(f.mean(axis=-1))


def _enhanced(phi_g: float | np.ndarray, phi_b: np.ndarray) -> np.ndarray:
    xi = 2.0 * phi_g * phi_b / (phi_g ** 2 + phi_b ** 2 + EPS)
    return (xi + 1.0) ** 2 / 4.0


def mean_emeasure(pred, gt):
    pred, gt = _prepare(pred, gt)
    pp, tp = _threshold_counts(pred, gt)
    n = gt.shape[-1] * gt.shape[-2]
    g = gt.sum(axis=(-2, -1))[..., None]
    fp = pp - tp
    fn = g - tp
    tn = n - g - fp
    mg = g / n
    mb = pp / n
    # the enhanced map only takes four values, one per (gt, binary) combination
    score = (tp * _enhanced(1 - mg, 1 - mb) + fp * _enhanced(-mg, 1 - mb)
             + fn * _enhanced(1 - mg, -mb) + tn * _enhanced(-mg, -mb)) / n
    score = np.where(g == 0, (n - pp) / n, score)
    score = np.where(g == n, pp / n, score)
    return _scalar(score.mean(axis=-1))


def _masked_stats(x: np.ndarray, mask: np.ndarray):
    count = mask.sum(axis=(-2, -1))
    safe = np.maximum(count, 1)
    mean = (x * mask).sum(axis=(-2, -1)) / safe
    var = (((x - mean[..., None, None]) ** 2) * mask).sum(axis=(-2, -1)) / safe
    return mean, var, count


def _object_score(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mean, var, _ = _masked_stats(x, mask)
    return 2.0 * mean / (mean ** 2 + 1.0 + 2.0 * np.sqrt(var) + EPS)


def _split_index(gt: np.ndarray, axis: int) -> np.ndarray:
    """Integer cell boundary nearest the foreground centroid along one image axis."""
    size = gt.shape[axis]
    profile = gt.sum(axis=axis + 1 if axis == -2 else -2)
    mass = np.maximum(profile.sum(axis=-1), 1e-300)
    centre = (profile * (np.arange(size) + 0.5)).sum(axis=-1) / mass
    return np.clip(np.floor(centre + 0.5), 1, size - 1).astype(np.int64)


def smeasure(pred, gt, alpha: float = 0.5):
    pred, gt = _prepare(pred, gt)
    h, w = gt.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"smeasure needs maps of at least 2x2, got {gt.shape}")
    mu = gt.mean(axis=(-2, -1))

    fg = gt > 0.5
    s_object = mu * _object_score(pred, fg) + (1 - mu) * _object_score(1.0 - pred, ~fg)

    sy = _split_index(gt, -2)[..., None, None]
    sx = _split_index(gt, -1)[..., None, None]
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    top, left = rows < sy, cols < sx
    fg_mass = np.maximum(gt.sum(axis=(-2, -1)), 1e-300)
    s_region = np.zeros_like(mu)
    for quad in (top & left, top & ~left, ~top & left, ~top & ~left):
        xm, xv, _ = _masked_stats(pred, quad)
        ym, yv, count = _masked_stats(gt, quad)
        cov = ((pred - xm[..., None, None]) * (gt - ym[..., None, None]) * quad).sum(axis=(-2, -1))
        cov = cov / np.maximum(count, 1)
        ssim = (4 * xm * ym * cov + EPS) / ((xm ** 2 + ym ** 2) * (xv + yv) + EPS)
        weight = (gt * quad).sum(axis=(-2, -1)) / fg_mass
        s_region = s_region + weight * ssim

    score = np.maximum(alpha * s_object + (1 - alpha) * s_region, 0.0)
    score = np.where(mu == 0, 1.0 - pred.mean(axis=(-2, -1)), score)
    score = np.where(mu == 1, pred.mean(axis=(-2, -1)), score)
    return _scalar(score)


def boundary_band(gt, radius: int) -> np.ndarray:
    """Pixels within ``radius`` (square neighbourhood) of the foreground edge."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    gt = np.asarray(gt) > 0.5
    size = 2 * radius + 1
    dilated = ndimage.maximum_filter(gt, size=size, mode="nearest")
    eroded = ndimage.minimum_filter(gt, size=size, mode="nearest")
    return dilated ^ eroded


def all_metrics(pred, gt) -> dict[str, float]:
    return {"mae": mae(pred, gt), "mean_f": mean_fbeta(pred, gt),
            "mean_e": mean_emeasure(pred, gt), "s_measure": smeasure(pred, gt)}


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, pred, gt) -> None:
        self.rows.append({"id": sample_id, **all_metrics(pred, gt)})

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            raise ValueError("empty report has no aggregate")
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", *METRIC_NAMES])
            for r in self.rows:
                writer.writerow([r["id"], *(repr(float(r[k])) for k in METRIC_NAMES)])
            agg = self.aggregate
            writer.writerow(["AGGREGATE", *(repr(agg[k]) for k in METRIC_NAMES)])


_PREFIXES = ("gt_", "pred_", "img_", "conf_")


def sample_id(path: Path) -> str:
    stem = Path(path).stem
    for prefix in _PREFIXES:
        if stem.startswith(prefix):
            return stem[len(prefix):]
    return stem


class MissingPairError(ValueError):
    pass


def evaluate_dataset(pred_dir, gt_dir) -> MetricReport:
    """Score every prediction PGM against the ground-truth PGM with the same id."""
    preds = {sample_id(p): p for p in Path(pred_dir).glob("*.pgm")}
    gts = {sample_id(p): p for p in Path(gt_dir).glob("*.pgm")}
    orphans = sorted(set(preds) ^ set(gts))
    if orphans:
        raise MissingPairError(f"no matching prediction/ground-truth pair for id(s): {', '.join(orphans)}")
    if not preds:
        raise MissingPairError(f"no prediction/ground-truth pairs found in {pred_dir} and {gt_dir}")
    report = MetricReport()
    for sid in sorted(preds):
        pred = pnm.read_pgm(preds[sid].read_bytes())
        gt = pnm.read_pgm(gts[sid].read_bytes())
        report.add(sid, pred, gt)
    return report
