"""Shared driver for the ablation-trend acceptance runs (train, evaluate, collect)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from canet.metrics import boundary_band
from canet.synth import generate_dataset, load_dataset
from canet.train import TrainConfig, evaluate, predict, read_log, train

TRAIN_COUNT, TEST_COUNT = 200, 50
DIFFICULTY = 0.8
SIZE = 64
TRAIN_BASE_SEED, TEST_BASE_SEED = 0, 100_000
EPOCHS = 20
MODES = ("m2", "m3", "ours")
SEEDS = (0, 1, 2)
BAND_RADIUS = 2


@dataclass
class RunResult:
    mode: str
    seed: int
    mae: float
    mean_e: float
    mean_f: float
    s_measure: float
    first_mean_yc: float
    last_mean_yc: float
    band_conf: float          # mean c_ref inside the boundary band, averaged over test images
    off_band_conf: float
    seconds: float


def make_datasets(root: Path) -> tuple[Path, Path]:
    train_dir, test_dir = root / "train", root / "test"
    generate_dataset(train_dir, TRAIN_COUNT, SIZE, TRAIN_BASE_SEED, DIFFICULTY)
    generate_dataset(test_dir, TEST_COUNT, SIZE, TEST_BASE_SEED, DIFFICULTY)
    return train_dir, test_dir


def band_confidence(state, test_dir: Path) -> tuple[float, float]:
    _, images, masks = load_dataset(test_dir)
    _, conf = predict(state, images)
    inside, outside = [], []
    for c, gt in zip(conf, masks[:, 0]):
        band = boundary_band(gt, BAND_RADIUS)
        inside.append(c[band].mean())
        outside.append(c[~band].mean())
    return float(np.mean(inside)), float(np.mean(outside))


def run_one(root: Path, train_dir: Path, test_dir: Path, mode: str, seed: int,
            epochs: int = EPOCHS, progress=None) -> RunResult:
    start = time.perf_counter()
    ckpt = root / f"{mode}_seed{seed}.ckpt"
    config = TrainConfig(mode=mode, seed=seed, epochs=epochs)
    result = train(config, train_dir, ckpt, progress=progress)
    agg = evaluate(result.state, test_dir).aggregate
    log = read_log(str(ckpt) + ".log.csv")
    band, off = band_confidence(result.state, test_dir)
    return RunResult(mode, seed, agg["mae"], agg["mean_e"], agg["mean_f"], agg["s_measure"],
                     log[0]["mean_yc"], log[-1]["mean_yc"], band, off, time.perf_counter() - start)


def run_ablation(root: Path, modes=MODES, seeds=SEEDS, epochs: int = EPOCHS, progress=None) -> list[RunResult]:
    root.mkdir(parents=True, exist_ok=True)
    train_dir, test_dir = make_datasets(root)
    results = []
    for seed in seeds:
        for mode in modes:
            res = run_one(root, train_dir, test_dir, mode, seed, epochs)
            results.append(res)
            if progress is not None:
                progress(res)
    return results
