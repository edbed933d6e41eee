import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canet.autograd import Tape, Tensor, precision64
from canet.gradcheck import grad_check
from canet.losses import (
    LossConfig, adversarial_confidence, adversarial_confidence_loss, bce, confidence_loss,
    confidence_weight, dynamic_supervision, lambda_schedule, perturb_labels, structure_loss,
)

LN2 = math.log(2.0)


class TestDynamicSupervision:
    def test_worked_example(self):
        assert dynamic_supervision(np.array([1.0]), np.array([0.01]))[0] == pytest.approx(0.99, abs=1e-15)

    def test_agreement_is_zero(self):
        assert dynamic_supervision(np.array([0.0, 1.0]), np.array([0.0, 1.0])).tolist() == [0.0, 0.0]

    def test_background_error(self):
        assert dynamic_supervision(np.array([0.0]), np.array([0.7]))[0] == pytest.approx(0.7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dynamic_supervision(np.zeros(3), np.zeros(4))

    @given(st.floats(0.0, 1.0), st.floats(1e-6, 1 - 1e-6))
    def test_properties(self, y, p):
        yc = dynamic_supervision(np.array([y]), np.array([p]))[0]
        assert -1e-12 <= yc <= 1 + 1e-12
        sym = dynamic_supervision(np.array([0.0]), np.array([1 - p]))[0]
        assert dynamic_supervision(np.array([1.0]), np.array([p]))[0] == pytest.approx(sym)
        for yb in (0.0, 1.0):
            assert dynamic_supervision(np.array([yb]), np.array([p]))[0] == pytest.approx(abs(yb - p))


class TestConfidenceLoss:
    def test_half_gives_ln2(self):
        with precision64():
            c = Tensor(np.full((2, 1, 4, 4), 0.5))
            t = np.random.default_rng(0).random((2, 1, 4, 4))
            assert abs(confidence_loss(c, c, t, t).item() - LN2) < 1e-9

    def test_two_pixel_case(self):
        with precision64():
            c = Tensor([0.9, 0.2])
            val = bce(c, np.array([1.0, 0.0])).item()
        assert val == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
        assert val == pytest.approx(0.1643, abs=1e-4)

    def test_minimised_at_target(self):
        with precision64():
            t = 0.3
            vals = [bce(Tensor([p]), np.array([t])).item() for p in (0.1, 0.2, 0.29, 0.3, 0.31, 0.5)]
        assert min(vals) == vals[3]

    def test_rejects_bad_target(self):
        c = Tensor(np.full(3, 0.5))
        with pytest.raises(ValueError):
            confidence_loss(c, c, np.array([0.0, 1.2, 0.5]), np.zeros(3))


class TestWeights:
    def test_values(self):
        assert np.all(confidence_weight(np.full(4, 0.3), 0.0) == 1.0)
        assert confidence_weight(np.array([0.5]), 10.0)[0] == 6.0
        assert confidence_weight(np.array([1.0]), 10.0)[0] == 11.0


class TestStructureLoss:
    def test_perfect_prediction(self):
        with precision64():
            y = (np.random.default_rng(0).random((1, 1, 6, 6)) > 0.5).astype(float)
            p = Tensor(np.clip(y, 1e-7, 1 - 1e-7))
            w = 1 + 10 * np.random.default_rng(1).random(y.shape)
            assert structure_loss(p, y, w).item() <= 2e-6

    def test_uniform_half_on_balanced_mask(self):
        # direct evaluation: 16 pixels, 8 foreground, prediction 0.5, s = 1
        y = np.zeros((1, 1, 4, 4))
        y[..., :2] = 1
        with precision64():
            val = structure_loss(Tensor(np.full(y.shape, 0.5)), y, np.ones(y.shape), 1.0).item()
        inter = 0.5 * 8
        union = 0.5 * 16 + 8
        expected = LN2 + 1 - (2 * inter + 1) / (union + 1)
        assert val == pytest.approx(expected, abs=1e-12)
        assert val == pytest.approx(LN2 + 1 - 9 / 17, abs=1e-12)

    def test_weight_homogeneity(self):
        rng = np.random.default_rng(2)
        y = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
        w = 1 + rng.random(y.shape)
        with precision64():
            p = Tensor(rng.uniform(0.05, 0.95, y.shape))
            assert structure_loss(p, y, w, 0.0).item() == pytest.approx(
                structure_loss(p, y, 2 * w, 0.0).item(), rel=1e-12)
            a = structure_loss(p, y, w, 1.0).item()
            b = structure_loss(p, y, 2 * w, 1.0).item()
        assert a != b

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        with precision64():
            p = Tensor(rng.uniform(1e-4, 1 - 1e-4, y.shape))
            assert structure_loss(p, y, 1 + 5 * rng.random(y.shape)).item() >= 0

    def test_single_pixel_gradient_points_toward_label(self):
        rng = np.random.default_rng(3)
        y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
        logits0 = rng.normal(size=y.shape)
        for idx in [(0, 0, 0, 0), (0, 0, 2, 3), (0, 0, 3, 1)]:
            with precision64():
                z = Tensor(logits0, requires_grad=True)
                with Tape() as tape:
                    loss = structure_loss(1.0 / (1.0 + _exp(-z)), y, np.ones(y.shape))
                tape.backward(loss)
            # descending the gradient moves the logit up for foreground, down for background
            step = -z.grad[idx]
            assert (step > 0) == (y[idx] == 1)

    def test_grad_check(self):
        rng = np.random.default_rng(4)
        y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        w = 1 + 3 * rng.random(y.shape)
        with precision64():
            p = Tensor(rng.uniform(0.1, 0.9, y.shape))
            assert grad_check(lambda: structure_loss(p, y, w), [p]) < 1e-3


def _exp(z):
    from canet.autograd import make
    out = np.exp(z.data)
    return make(out, (z,), lambda g: (g * out,))


class TestPerturbation:
    def test_ranges(self):
        y = np.array([0, 1] * 5000, dtype=float)
        v = perturb_labels(y, 0.01, np.random.default_rng(0))
        fg, bg = v[y == 1], v[y == 0]
        assert np.all((fg > 0.99) & (fg < 1.0))
        assert np.all((bg > 0.0) & (bg < 0.01))
        np.testing.assert_array_equal(np.round(v), y)

    def test_fresh_draws(self):
        rng = np.random.default_rng(1)
        y = np.ones(10)
        assert not np.array_equal(perturb_labels(y, 0.01, rng), perturb_labels(y, 0.01, rng))


class TestAdversarial:
    def test_half_outputs(self):
        with precision64():
            d = Tensor(np.full((1, 1, 4, 4), 0.5))
            assert abs(adversarial_confidence_loss(d, d, d).item() - 2 * LN2) < 1e-9

    def test_perfect_discriminator(self):
        with precision64():
            lo = Tensor(np.full(4, 1e-9))
            hi = Tensor(np.full(4, 1 - 1e-9))
            assert adversarial_confidence_loss(lo, lo, hi).item() < 1e-6

    def test_confidence_values(self):
        np.testing.assert_allclose(adversarial_confidence(np.array([0.5, 1.0, 0.0, 0.25])), [0, 1, 1, 0.5])

    @given(st.floats(0.0, 1.0))
    def test_symmetry(self, d):
        assert adversarial_confidence(np.array([d]))[0] == pytest.approx(
            adversarial_confidence(np.array([1 - d]))[0], abs=1e-12)

    def test_grad_check(self):
        rng = np.random.default_rng(5)
        with precision64():
            ds = [Tensor(rng.uniform(0.1, 0.9, (1, 1, 3, 3))) for _ in range(3)]
            assert grad_check(lambda: adversarial_confidence_loss(*ds), ds) < 1e-3


class TestLambdaSchedule:
    def test_dynamic(self):
        cfg = LossConfig(lambda_mode="dynamic")
        assert [lambda_schedule(cfg, t) for t in (1, 5, 6, 10, 15, 20, 30)] == [0, 0, 2, 10, 20, 20, 20]

    def test_fixed(self):
        cfg = LossConfig(lambda_mode="fixed", lam=10.0)
        assert {lambda_schedule(cfg, t) for t in range(1, 21)} == {10.0}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lam=-1)
        with pytest.raises(ValueError):
            LossConfig(perturbation_band=0.5)
        with pytest.raises(ValueError):
            LossConfig(supervision_mode="gan")
        with pytest.raises(ValueError):
            lambda_schedule(LossConfig(), 0)
