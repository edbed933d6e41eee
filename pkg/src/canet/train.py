"""Joint training of the detector and the confidence network, checkpointing and inference."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import pnm
from .autograd import Tape, Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .cod import CodConfig, CodNetwork
from .confidence import ConfConfig, ConfidenceNetwork
from .losses import (
    LossConfig, adversarial_confidence, adversarial_confidence_loss, confidence_loss, confidence_weight,
    dynamic_supervision, lambda_schedule, perturb_labels, structure_loss,
)
from .metrics import MetricReport
from .optim import Adam
from .synth import load_dataset

MODES = ("ours", "m1", "m2", "m3")
MODE_SUPERVISION = {"ours": "dynamic", "m3": "adversarial", "m1": "none", "m2": "none"}
MIN_BATCH = 4
EVAL_CHUNK = 10
LOG_HEADER = ("epoch", "loss_s", "loss_c", "mean_yc", "lambda", "seconds")
CHECKPOINT_KIND = "canet-train"

# independent random streams derived from the run seed
_STREAM_COD, _STREAM_CEM, _STREAM_TRAIN, _STREAM_SHUFFLE = 0, 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    lr_cod: float = 2.5e-5
    lr_conf: float = 1.5e-5
    lr_scale: float = 20.0
    image_size: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0
    mode: str = "ours"
    update_cem: bool = True
    cod_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    fusion_width: int = 32
    cem_widths: tuple[int, ...] = (8, 16, 32, 32, 32)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < MIN_BATCH:
            raise ValueError(f"batch_size must be >= {MIN_BATCH} for batch normalisation, got {self.batch_size}")
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        for name in ("lr_cod", "lr_conf", "lr_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        # the mode is authoritative for the kind of confidence supervision
        self.loss = replace(self.loss, supervision_mode=MODE_SUPERVISION[self.mode])
        self.cod_widths = tuple(int(w) for w in self.cod_widths)
        self.cem_widths = tuple(int(w) for w in self.cem_widths)

    @property
    def trains_cem(self) -> bool:
        return self.mode in ("ours", "m3") and self.update_cem

    def lam(self, epoch: int) -> float:
        if self.mode in ("m1", "m2"):
            return 0.0
        return lambda_schedule(self.loss, epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cod_widths"] = list(self.cod_widths)
        d["cem_widths"] = list(self.cem_widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        raw = dict(raw)
        if "loss" in raw:
            loss = raw["loss"]
            bad = sorted(set(loss) - {f.name for f in fields(LossConfig)})
            if bad:
                raise ValueError(f"unknown loss config field(s): {', '.join(bad)}")
            raw["loss"] = LossConfig(**loss)
        return cls(**raw)


@dataclass
class StepStats:
    loss_s: float
    loss_c: float        # nan when the confidence network is not trained
    mean_yc: float


@dataclass
class EpochLog:
    epoch: int
    loss_s: float
    loss_c: float
    mean_yc: float
    lam: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.loss_s), repr(self.loss_c), repr(self.mean_yc),
                repr(self.lam), f"{self.seconds:.3f}"]


class TrainState:
    """Both networks, their optimizers, the training rng and the number of finished epochs."""

    def __init__(self, config: TrainConfig):
        self.config = config
        cod_cfg = CodConfig(image_size=config.image_size, widths=config.cod_widths,
                            fusion_width=config.fusion_width, refine=config.mode != "m1")
        self.cod = CodNetwork(cod_cfg, seed=[config.seed, _STREAM_COD])
        self.cem = ConfidenceNetwork(ConfConfig(widths=config.cem_widths), seed=[config.seed, _STREAM_CEM])
        self.cod_opt = Adam(self.cod.params, config.lr_cod * config.lr_scale)
        self.cem_opt = Adam(self.cem.params, config.lr_conf * config.lr_scale)
        self.rng = np.random.default_rng([config.seed, _STREAM_TRAIN])
        self.epoch = 0

    def _groups(self):
        for prefix, net, opt in (("cod", self.cod, self.cod_opt), ("cem", self.cem, self.cem_opt)):
            p = net.params
            yield f"{prefix}.param.", {n: t.data for n, t in p.params.items()}
            yield f"{prefix}.buffer.", p.buffers
            yield f"{prefix}.adam_m.", opt.state.m
            yield f"{prefix}.adam_v.", opt.state.v

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for prefix, table in self._groups():
            for name, arr in table.items():
                tensors[prefix + name] = arr
        meta = {
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "optim": {k: {"step": o.state.step, "lr": o.state.lr}
                      for k, o in (("cod", self.cod_opt), ("cem", self.cem_opt))},
        }
        return Checkpoint(meta, tensors)

    def load(self, ckpt: Checkpoint) -> None:
        """Copy every tensor of ``ckpt`` into this state; shapes and names must match exactly."""
        remaining = dict(ckpt.tensors)
        for prefix, table in self._groups():
            for name, arr in table.items():
                key = prefix + name
                if key not in remaining:
                    raise CheckpointError(f"checkpoint has no tensor {key}")
                src = remaining.pop(key)
                if src.shape != arr.shape:
                    raise CheckpointError(
                        f"shape mismatch for tensor {key}: checkpoint {src.shape}, model {arr.shape}")
                arr[...] = src
        if remaining:
            raise CheckpointError(f"checkpoint has unexpected tensor(s): {', '.join(sorted(remaining))[:200]}")
        meta = ckpt.meta
        self.epoch = int(meta["epoch"])
        self.rng.bit_generator.state = meta["rng"]
        for key, opt in (("cod", self.cod_opt), ("cem", self.cem_opt)):
            opt.state.step = int(meta["optim"][key]["step"])
            opt.state.lr = float(meta["optim"][key]["lr"])

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        if ckpt.meta.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError("checkpoint does not hold a training state")
        state = cls(TrainConfig.from_dict(ckpt.meta["config"]))
        state.load(ckpt)
        return state


def load_state(path) -> TrainState:
    return TrainState.from_checkpoint(load_checkpoint(path))


def _check_finite(value: float, term: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {term} at epoch {epoch}: {value}")


def confidence_maps(state: TrainState, image: Tensor, preds: list[np.ndarray]) -> list[np.ndarray]:
    """Eval-mode confidence for each prediction map, computed in a single batched forward."""
    n = image.shape[0]
    images = Tensor(np.concatenate([image.data] * len(preds)))
    out = state.cem.forward(images, Tensor(np.concatenate(preds)), training=False).data
    if state.config.mode == "m3":
        out = adversarial_confidence(out)
    return [out[i * n:(i + 1) * n] for i in range(len(preds))]


def train_step(state: TrainState, images: np.ndarray, masks: np.ndarray, epoch: int) -> StepStats:
    """One batch in the order: detector forward, confidence update, weighting, detector update."""
    cfg = state.config
    lam = cfg.lam(epoch)
    image = Tensor(images)
    gt = np.asarray(masks, dtype=image.dtype)

    state.cod_opt.zero_grad()
    with Tape() as cod_tape:
        out = state.cod.forward(image, training=True)
    y_ini, y_ref = out.y_ini.data, out.y_ref.data
    yc_ini, yc_ref = dynamic_supervision(gt, y_ini), dynamic_supervision(gt, y_ref)
    mean_yc = 0.5 * (float(yc_ini.mean()) + float(yc_ref.mean()))

    loss_c = math.nan
    if cfg.trains_cem:
        cem, rng = state.cem, state.rng
        state.cem_opt.zero_grad()
        with Tape() as cem_tape:
            if cfg.mode == "m3":
                d_ini = cem.forward(image, Tensor(y_ini), True, rng)
                d_ref = cem.forward(image, Tensor(y_ref), True, rng)
                relaxed = perturb_labels(gt, cfg.loss.perturbation_band, rng)
                d_gt = cem.forward(image, Tensor(relaxed), True, rng)
                lc = adversarial_confidence_loss(d_ini, d_ref, d_gt)
                term = "adversarial confidence loss L_c'"
            else:
                c_ini = cem.forward(image, Tensor(y_ini), True, rng)
                c_ref = cem.forward(image, Tensor(y_ref), True, rng)
                lc = confidence_loss(c_ini, c_ref, yc_ini, yc_ref)
                term = "confidence loss L_c"
        loss_c = lc.item()
        _check_finite(loss_c, term, epoch)
        cem_tape.backward(lc)
        state.cem_opt.step()

    if lam != 0.0:
        c_ini, c_ref = confidence_maps(state, image, [y_ini, y_ref])
        w_ini, w_ref = confidence_weight(c_ini, lam), confidence_weight(c_ref, lam)
    else:
        w_ini = w_ref = np.ones_like(gt)

    smoothing = cfg.loss.dice_smoothing
    with cod_tape:
        ls = structure_loss(out.y_ini, gt, w_ini, smoothing) + structure_loss(out.y_ref, gt, w_ref, smoothing)
    loss_s = ls.item()
    _check_finite(loss_s, "structure loss L_s", epoch)
    cod_tape.backward(ls)
    state.cod_opt.step()
    return StepStats(loss_s, loss_c, mean_yc)


def epoch_batches(config: TrainConfig, n: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a short tail is folded into the previous batch."""
    if n < MIN_BATCH:
        raise ValueError(f"need at least {MIN_BATCH} training samples, got {n}")
    order = np.random.default_rng([config.seed, _STREAM_SHUFFLE, epoch]).permutation(n)
    bs = config.batch_size
    batches = [order[i:i + bs] for i in range(0, n, bs)]
    if len(batches) > 1 and len(batches[-1]) < MIN_BATCH:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def run_epoch(state: TrainState, images: np.ndarray, masks: np.ndarray) -> EpochLog:
    epoch = state.epoch + 1
    start = time.perf_counter()
    stats = [train_step(state, images[idx], masks[idx], epoch)
             for idx in epoch_batches(state.config, len(images), epoch)]
    state.epoch = epoch
    return EpochLog(epoch=epoch, loss_s=float(np.mean([s.loss_s for s in stats])),
                    loss_c=float(np.mean([s.loss_c for s in stats])),
                    mean_yc=float(np.mean([s.mean_yc for s in stats])),
                    lam=state.config.lam(epoch), seconds=time.perf_counter() - start)


def default_log_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".log.csv")


def periodic_path(ckpt_path, epoch: int) -> Path:
    p = Path(ckpt_path)
    return p.with_name(f"{p.stem}.epoch{epoch:03d}{p.suffix}")


def _append_log(path: Path, row: EpochLog | None) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_HEADER)
        if row is not None:
            writer.writerow(row.row())


def read_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    state: TrainState
    logs: list[EpochLog]


def _resume_state(config: TrainConfig, path) -> TrainState:
    state = load_state(path)
    saved = state.config.to_dict()
    wanted = config.to_dict()
    diff = sorted(k for k in wanted if k not in ("epochs", "checkpoint_every") and wanted[k] != saved[k])
    if diff:
        raise ValueError(f"resume config differs from the checkpoint in: {', '.join(diff)}")
    state.config = replace(state.config, epochs=config.epochs, checkpoint_every=config.checkpoint_every)
    return state


def train(config: TrainConfig, data_dir, out_path=None, log_path=None, resume=None,
          progress: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs; with ``resume`` continue from that checkpoint.

    The final state is written to ``out_path`` and, if ``checkpoint_every`` is
    set, every that many epochs to ``periodic_path(out_path, epoch)``.  Each
    epoch appends one row to the CSV log.
    """
    manifest, images, masks = load_dataset(data_dir)
    if manifest.size != config.image_size:
        raise ValueError(f"dataset {data_dir} holds {manifest.size}px images but image_size is "
                         f"{config.image_size}")
    images = images.astype(np.float32)
    masks = masks.astype(np.float32)
    state = _resume_state(config, resume) if resume is not None else TrainState(config)
    if state.epoch > config.epochs:
        raise ValueError(f"checkpoint is at epoch {state.epoch}, beyond the requested {config.epochs}")
    log_file = None
    if out_path is not None:
        log_file = Path(log_path) if log_path is not None else default_log_path(out_path)
        if resume is None and log_file.exists():
            log_file.unlink()
        _append_log(log_file, None)
    logs = []
    while state.epoch < config.epochs:
        row = run_epoch(state, images, masks)
        logs.append(row)
        if log_file is not None:
            _append_log(log_file, row)
        if progress is not None:
            progress(row)
        every = config.checkpoint_every
        if out_path is not None and every and state.epoch % every == 0 and state.epoch < config.epochs:
            save_checkpoint(periodic_path(out_path, state.epoch), state.to_checkpoint())
    if out_path is not None:
        save_checkpoint(out_path, state.to_checkpoint())
    return TrainResult(state, logs)


def predict(state: TrainState, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode refined prediction and its confidence map, each (N, H, W) float64."""
    size = state.config.image_size
    if images.ndim != 4 or images.shape[1:] != (3, size, size):
        raise ValueError(f"expected N x 3 x {size} x {size} images (the training size), got {images.shape}")
    preds, confs = [], []
    for i in range(0, len(images), EVAL_CHUNK):
        image = Tensor(images[i:i + EVAL_CHUNK])
        y_ref = state.cod.forward(image, training=False).y_ref.data
        (c_ref,) = confidence_maps(state, image, [y_ref])
        preds.append(y_ref[:, 0])
        confs.append(c_ref[:, 0])
    empty = np.zeros((0, size, size))
    pred = np.concatenate(preds).astype(np.float64) if preds else empty
    conf = np.concatenate(confs).astype(np.float64) if confs else empty
    return pred, conf


def _quantize(x: np.ndarray) -> np.ndarray:
    # the values a PGM round trip would give back
    return np.round(np.clip(x, 0.0, 1.0) * 255) / 255


def infer(ckpt_path, image_path, pred_path, conf_path) -> tuple[np.ndarray, np.ndarray]:
    state = load_state(ckpt_path)
    image = pnm.read_ppm(Path(image_path).read_bytes())
    pred, conf = predict(state, image.transpose(2, 0, 1)[None])
    Path(pred_path).write_bytes(pnm.write_pgm(_quantize(pred[0])))
    Path(conf_path).write_bytes(pnm.write_pgm(_quantize(conf[0])))
    return pred[0], conf[0]


def evaluate(state: TrainState, data_dir) -> MetricReport:
    """Score the refined prediction, quantised to 8 bits, on every sample of a dataset."""
    manifest, images, masks = load_dataset(data_dir)
    pred, _ = predict(state, images)
    report = MetricReport()
    for sid, p, gt in zip(manifest.ids, pred, masks[:, 0]):
        report.add(sid, _quantize(p), gt)
    return report
