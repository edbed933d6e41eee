"""Acceptance suite: each test checks one criterion at its stated tolerance and prints a verdict line.

The ablation criteria (4, 5, 6) share one training campaign of nine runs and
dominate the wall time of the whole suite.
"""

import math
import os
import time

import numpy as np
import pytest

from canet.checkpoint import CheckpointError, decode, encode, load_checkpoint
from canet.gradsuite import run_suite
from canet.losses import (
    LossConfig, adversarial_confidence_loss, confidence_loss, dynamic_supervision, lambda_schedule,
)
from canet.autograd import Tensor, precision64
from canet.metrics import mae, mean_emeasure, mean_fbeta, smeasure
from canet.synth import generate_dataset
from canet.train import TrainConfig, evaluate, read_log, train

import ablation
from conftest import record_verdict
from test_metrics import all_4x4_masks, sweep_worst_error

CORES = len(os.sched_getaffinity(0))


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_suite(seed=0, include_networks=True)
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.error)
    unchecked = [r.name for r in results if r.checked == 0]
    ok = worst.error < 1e-3 and not unchecked and seconds < 120
    detail = (f"{len(results)} cases, worst {worst.error:.2e} ({worst.name} {worst.shape}), "
              f"{seconds:.1f}s (limit 1e-3, 120s)")
    assert record_verdict(1, ok, detail), f"{detail}; unchecked: {unchecked}"


def test_criterion_2_loss_anchors():
    yc = dynamic_supervision(np.array([1.0]), np.array([0.01]))[0]
    with precision64():
        half = Tensor(np.full((2, 1, 8, 8), 0.5))
        target = np.random.default_rng(0).random((2, 1, 8, 8))
        lc = confidence_loss(half, half, target, 1 - target).item()
        ladv = adversarial_confidence_loss(half, half, half).item()
    lam = [lambda_schedule(LossConfig(lambda_mode="dynamic"), t) for t in (5, 10, 20)]
    checks = {
        "yc": yc == 0.99,
        "L_c": abs(lc - math.log(2)) <= 1e-9,
        "L_c'": abs(ladv - 2 * math.log(2)) <= 1e-9,
        "lambda_D": lam == [0.0, 10.0, 20.0],
    }
    detail = (f"yc={yc!r} L_c-ln2={lc - math.log(2):.1e} L_c'-2ln2={ladv - 2 * math.log(2):.1e} "
              f"lambda_D={lam}")
    assert record_verdict(2, all(checks.values()), detail), checks


def test_criterion_3_overfit(tmp_path):
    data = tmp_path / "four"
    generate_dataset(data, 4, 64, 0, ablation.DIFFICULTY)
    config = TrainConfig(mode="ours", loss=LossConfig(lam=10.0), batch_size=4, epochs=500, seed=0)
    start = time.perf_counter()
    result = train(config, data, tmp_path / "overfit.ckpt")
    seconds = time.perf_counter() - start
    final_ls = result.logs[-1].loss_s
    train_mae = evaluate(result.state, data).aggregate["mae"]
    ok = final_ls < 0.05 and train_mae < 0.02 and seconds < 180
    detail = (f"L_s={final_ls:.4f} (<0.05) train MAE={train_mae:.4f} (<0.02) "
              f"time={seconds:.0f}s (<180s, {CORES} core)")
    assert record_verdict(3, ok, detail), detail


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    start = time.perf_counter()
    results = ablation.run_ablation(tmp_path_factory.mktemp("ablation"))
    for r in results:
        print(r)
    return results, time.perf_counter() - start


def _median(results, mode, field):
    return float(np.median([getattr(r, field) for r in results if r.mode == mode]))


def test_criterion_4_ablation_trend(campaign):
    results, seconds = campaign
    mae_ours, mae_m2 = _median(results, "ours", "mae"), _median(results, "m2", "mae")
    e_ours, e_m2 = _median(results, "ours", "mean_e"), _median(results, "m2", "mean_e")
    mae_m3, e_m3 = _median(results, "m3", "mae"), _median(results, "m3", "mean_e")
    ok = mae_ours <= mae_m2 and e_ours >= e_m2 and seconds < 3600
    detail = (f"median MAE ours {mae_ours:.4f} vs m2 {mae_m2:.4f} (m3 {mae_m3:.4f}); "
              f"median E ours {e_ours:.4f} vs m2 {e_m2:.4f} (m3 {e_m3:.4f}); "
              f"{seconds / 60:.1f} min on {CORES} core(s) (limit 60 min on 4)")
    assert record_verdict(4, ok, detail), detail


def test_criterion_5_boundary_concentration(campaign):
    ours = [r for r in campaign[0] if r.mode == "ours"]
    wins = sum(r.band_conf > r.off_band_conf for r in ours)
    detail = "; ".join(f"seed {r.seed}: band {r.band_conf:.4f} off {r.off_band_conf:.4f}" for r in ours)
    assert record_verdict(5, wins >= 2, f"{wins}/3 seeds ({detail})"), detail


def test_criterion_6_supervision_shrinks(campaign):
    ours = [r for r in campaign[0] if r.mode == "ours"]
    ok = len(ours) == 3 and all(r.last_mean_yc < r.first_mean_yc for r in ours)
    detail = "; ".join(f"seed {r.seed}: {r.first_mean_yc:.4f} -> {r.last_mean_yc:.4f}" for r in ours)
    assert record_verdict(6, ok, detail), detail


def test_criterion_7_metric_oracles():
    worst = sweep_worst_error(reps=10)
    masks = all_4x4_masks()[1:-1]
    perfect = {"mae": mae(masks, masks), "F": mean_fbeta(masks, masks),
               "E": mean_emeasure(masks, masks), "S": smeasure(masks, masks)}
    target = {"mae": 0.0, "F": 1.0, "E": 1.0, "S": 1.0}
    gaps = {k: float(np.abs(v - target[k]).max()) for k, v in perfect.items()}
    exact = {k: bool(np.all(v == target[k])) for k, v in perfect.items()}
    sweep_ok = max(worst.values()) < 1e-9
    ok = sweep_ok and all(exact.values())
    detail = (f"sweep worst {max(worst.values()):.1e} (<1e-9); perfect-score gaps "
              + " ".join(f"{k}={g:.1e}" for k, g in gaps.items()) + " (required exactly 0)")
    assert record_verdict(7, ok, detail), (worst, gaps)


def _small_run_config(**overrides):
    return TrainConfig(**{"epochs": 3, "batch_size": 4, "seed": 11, **overrides})


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate_dataset(root, 8, 64, 7, ablation.DIFFICULTY)
    return root


def test_criterion_8_determinism_and_persistence(small_data, tmp_path):
    a, b, full, resumed = (tmp_path / f"{n}.ckpt" for n in ("a", "b", "full", "resumed"))
    train(_small_run_config(), small_data, a)
    train(_small_run_config(), small_data, b)
    same_seed = a.read_bytes() == b.read_bytes()

    train(_small_run_config(checkpoint_every=1), small_data, full)
    train(_small_run_config(checkpoint_every=1), small_data, resumed, resume=tmp_path / "full.epoch001.ckpt")
    resume_exact = resumed.read_bytes() == full.read_bytes() and \
        [r["epoch"] for r in read_log(str(resumed) + ".log.csv")] == [2, 3]

    data = a.read_bytes()
    round_trip = encode(load_checkpoint(a)) == data and encode(decode(data)) == data

    corrupt = bytearray(data)
    corrupt[len(corrupt) // 3] ^= 0x01
    try:
        decode(bytes(corrupt))
        refused = False
    except CheckpointError as exc:
        refused = "checksum" in str(exc)

    checks = {"same-seed identical": same_seed, "resume bit-exact": resume_exact,
              "round trip": round_trip, "corruption refused": refused}
    detail = " ".join(f"{k}={'yes' if v else 'NO'}" for k, v in checks.items())
    assert record_verdict(8, all(checks.values()), detail), checks


def test_criterion_9_ablation_equivalence(small_data, tmp_path):
    ours = _small_run_config(mode="ours", update_cem=False, loss=LossConfig(lam=0.0), checkpoint_every=1)
    m2 = _small_run_config(mode="m2", checkpoint_every=1)
    train(ours, small_data, tmp_path / "ours.ckpt")
    train(m2, small_data, tmp_path / "m2.ckpt")
    mismatched = []
    for epoch in (1, 2, 3):
        suffix = f".epoch{epoch:03d}.ckpt" if epoch < 3 else ".ckpt"
        x = load_checkpoint(tmp_path / f"ours{suffix}")
        y = load_checkpoint(tmp_path / f"m2{suffix}")
        names = x.tensors.keys() | y.tensors.keys()
        mismatched += [f"epoch {epoch} {n}" for n in sorted(names)
                       if n not in x.tensors or n not in y.tensors
                       or not np.array_equal(x.tensors[n], y.tensors[n])]
        if x.meta["rng"] != y.meta["rng"] or x.meta["optim"] != y.meta["optim"]:
            mismatched.append(f"epoch {epoch} optimiser/rng state")
    detail = f"{len(mismatched)} mismatching tensors over 3 epochs of checkpoints"
    assert record_verdict(9, not mismatched, detail), mismatched[:5]
