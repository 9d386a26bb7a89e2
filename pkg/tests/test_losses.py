import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from shapelock.errors import DimensionMismatchError, DomainMismatchError, EmptyRegionError, ParameterError
from shapelock.losses import (
    LossBreakdown,
    LossWeights,
    adversarial_mse,
    cycle_consistency,
    dice_focal_loss,
    discriminator_mse,
    identity_loss,
    surrounding_l1,
    surrounding_region,
    total_cyclegan_loss,
)

from oracles import (
    autograd_gradient,
    bce_loop,
    cycle_l1_loop,
    finite_difference_gradient,
    max_relative_error,
    mse_loop,
    surrounding_l1_loop,
)


def t(values, dtype=torch.float32):
    return torch.tensor(values, dtype=dtype)


class TestSurroundingRegion:
    def test_all_false_mask_keeps_image(self):
        img = t([[1.0, 2.0], [3.0, 4.0]])
        out = surrounding_region(img, torch.zeros(2, 2, dtype=torch.bool))
        assert torch.equal(out, img)

    def test_all_true_mask_zeroes_image(self):
        img = t([[1.0, 2.0], [3.0, 4.0]])
        out = surrounding_region(img, torch.ones(2, 2, dtype=torch.bool))
        assert torch.equal(out, torch.zeros(2, 2))

    def test_elementwise_example(self):
        img = t([[1.0, 2.0], [3.0, 4.0]])
        mask = t([[1.0, 0.0], [0.0, 1.0]])
        out = surrounding_region(img, mask)
        assert torch.equal(out, t([[0.0, 2.0], [3.0, 0.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            surrounding_region(torch.zeros(2, 2), torch.zeros(3, 2))


class TestSurroundingL1:
    def test_identical_inputs_zero(self):
        img = torch.rand(5, 5)
        mask = torch.rand(5, 5) > 0.5
        assert float(surrounding_l1(img, img, mask)) == 0.0

    def test_difference_inside_mask_ignored(self):
        a = torch.rand(4, 4)
        b = a.clone()
        mask = torch.zeros(4, 4, dtype=torch.bool)
        mask[1:3, 1:3] = True
        b[1, 1] += 100.0
        b[2, 2] -= 50.0
        assert float(surrounding_l1(a, b, mask)) == 0.0

    def test_worked_2x2_example(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        b = t([[1.0, 5.0], [0.0, 4.0]])
        mask = t([[1.0, 0.0], [0.0, 1.0]])
        assert float(surrounding_l1(a, b, mask)) == pytest.approx(3.0)

    def test_matches_pixel_loop_oracle(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            a = gen.normal(0, 1, (6, 7))
            b = gen.normal(0, 1, (6, 7))
            mask = gen.random((6, 7)) > 0.6
            got = float(surrounding_l1(t(a, torch.float64), t(b, torch.float64), torch.tensor(mask)))
            assert got == pytest.approx(surrounding_l1_loop(a, b, mask), abs=1e-9)

    def test_symmetry(self):
        gen = np.random.default_rng(1)
        for _ in range(20):
            a = t(gen.normal(0, 1, (5, 5)))
            b = t(gen.normal(0, 1, (5, 5)))
            mask = torch.tensor(gen.random((5, 5)) > 0.5)
            assert float(surrounding_l1(a, b, mask)) == pytest.approx(
                float(surrounding_l1(b, a, mask)), rel=1e-6
            )

    def test_all_true_mask_errors(self):
        with pytest.raises(EmptyRegionError):
            surrounding_l1(torch.rand(3, 3), torch.rand(3, 3), torch.ones(3, 3, dtype=torch.bool))

    def test_all_pixels_mode(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        b = t([[1.0, 5.0], [0.0, 4.0]])
        mask = t([[1.0, 0.0], [0.0, 1.0]])
        assert float(surrounding_l1(a, b, mask, average_over="all")) == pytest.approx(6.0 / 4)

    def test_bad_mode_rejected(self):
        with pytest.raises(ParameterError):
            surrounding_l1(torch.rand(2, 2), torch.rand(2, 2), torch.zeros(2, 2), average_over="????")


class TestAdversarialMse:
    def test_perfect_real(self):
        assert float(adversarial_mse(torch.ones(3, 3), True)) == 0.0

    def test_all_zero_on_real_target(self):
        assert float(adversarial_mse(torch.zeros(3, 3), True)) == 1.0

    def test_fake_example(self):
        got = adversarial_mse(t([0.2, 0.6]), False)
        assert float(got) == pytest.approx(0.2)

    def test_matches_loop(self):
        gen = np.random.default_rng(2)
        for target in (True, False):
            scores = gen.normal(0, 1, (4, 4))
            got = float(adversarial_mse(t(scores, torch.float64), target))
            assert got == pytest.approx(mse_loop(scores, 1.0 if target else 0.0), abs=1e-12)

    def test_discriminator_combination(self):
        real = t([0.8, 1.0])
        fake = t([0.1, 0.3])
        expected = 0.5 * (mse_loop(real.numpy(), 1.0) + mse_loop(fake.numpy(), 0.0))
        assert float(discriminator_mse(real, fake)) == pytest.approx(expected, rel=1e-6)


class TestCycleAndIdentity:
    def test_perfect_reconstruction(self):
        x = torch.rand(4, 4)
        assert float(cycle_consistency(x, x)) == 0.0

    def test_constant_offset(self):
        x = torch.rand(4, 4)
        assert float(cycle_consistency(x, x + 0.75)) == pytest.approx(0.75, rel=1e-5)
        assert float(identity_loss(x, x - 1.25)) == pytest.approx(1.25, rel=1e-5)

    def test_matches_loop(self):
        gen = np.random.default_rng(3)
        a = gen.normal(0, 1, (4, 4))
        b = gen.normal(0, 1, (4, 4))
        got = float(cycle_consistency(t(a, torch.float64), t(b, torch.float64)))
        assert got == pytest.approx(cycle_l1_loop(a, b), abs=1e-12)


class TestTotalLoss:
    def test_all_zero(self):
        bd = total_cyclegan_loss(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights())
        assert bd.total == 0.0

    def test_worked_example(self):
        bd = total_cyclegan_loss(0.0, 0.0, 1.0, 2.0, 0.0, LossWeights(delta=10, lambda_=1))
        assert bd.total == pytest.approx(12.0)

    def test_identity_weight_zero_contributes_nothing(self):
        with_id = total_cyclegan_loss(0.5, 0.5, 1.0, 1.0, 5.0, LossWeights(gamma_identity=0.0))
        without = total_cyclegan_loss(0.5, 0.5, 1.0, 1.0, 0.0, LossWeights(gamma_identity=0.0))
        assert with_id.total == without.total

    def test_breakdown_invariant(self):
        gen = np.random.default_rng(4)
        for _ in range(100):
            terms = gen.uniform(0, 5, 5)
            w = LossWeights(*gen.uniform(0, 10, 3))
            bd = total_cyclegan_loss(*terms, w)
            expected = (
                terms[0] + terms[1] + w.delta * terms[2]
                + w.lambda_ * terms[3] + w.gamma_identity * terms[4]
            )
            assert bd.total == pytest.approx(expected, rel=1e-9)

    def test_lambda_scaling_exact_with_fractions(self):
        # pure arithmetic: exact rational inputs give exact rational scaling
        terms = [Fraction(1, 3), Fraction(2, 7), Fraction(5, 11), Fraction(3, 13), Fraction(0)]
        for k in (Fraction(2), Fraction(7, 3), Fraction(10)):
            w1 = LossWeights(delta=Fraction(10), lambda_=Fraction(1, 2), gamma_identity=Fraction(0))
            wk = LossWeights(delta=Fraction(10), lambda_=k * Fraction(1, 2), gamma_identity=Fraction(0))
            b1 = total_cyclegan_loss(*terms, w1)
            bk = total_cyclegan_loss(*terms, wk)
            assert bk.total - b1.total == (k - 1) * Fraction(1, 2) * terms[3]

    def test_negative_weight_rejected(self):
        with pytest.raises(ParameterError):
            LossWeights(delta=-1.0)


class TestDiceFocal:
    def test_perfect_prediction_near_zero(self):
        target = torch.tensor(np.random.default_rng(5).random((8, 8)) > 0.5)
        probs = torch.where(target, 1.0 - 1e-6, 1e-6)
        assert float(dice_focal_loss(probs, target)) < 1e-3

    def test_gamma_zero_reduces_to_bce(self):
        gen = np.random.default_rng(6)
        probs = gen.uniform(0.05, 0.95, (6, 6))
        target = gen.random((6, 6)) > 0.5
        got = float(dice_focal_loss(t(probs, torch.float64), torch.tensor(target), focal_gamma=0.0))
        dice_eps = 1e-5
        inter = (probs * target).sum()
        dice_part = 1 - (2 * inter + dice_eps) / (probs.sum() + target.sum() + dice_eps)
        assert got == pytest.approx(dice_part + bce_loop(probs, target), rel=1e-6)

    def test_single_pixel_closed_form(self):
        # target 1, p 0.5, gamma 2: focal term is 0.25 * ln 2
        got = float(dice_focal_loss(t([[0.5]], torch.float64), t([[1.0]], torch.float64)))
        dice_part = 1 - (2 * 0.5 + 1e-5) / (0.5 + 1.0 + 1e-5)
        assert got == pytest.approx(dice_part + 0.25 * math.log(2.0), rel=1e-6)

    def test_rejects_probabilities_outside_unit(self):
        with pytest.raises(DomainMismatchError):
            dice_focal_loss(t([[1.2]]), t([[1.0]]))

    def test_nonnegative_and_monotone_toward_target(self):
        gen = np.random.default_rng(7)
        target = torch.tensor(gen.random((8, 8)) > 0.5)
        start = t(gen.uniform(0.1, 0.9, (8, 8)), torch.float64)
        ideal = torch.where(target, 1.0 - 1e-6, 1e-6).to(torch.float64)
        prev = float("inf")
        for alpha in np.linspace(0.0, 1.0, 8):
            probs = (1 - alpha) * start + alpha * ideal
            val = float(dice_focal_loss(probs, target))
            assert val >= 0.0
            assert val <= prev + 1e-12
            prev = val


class TestGradients:
    """Analytic (autograd) vs central finite differences, float64, h=1e-5."""

    H = 1e-5
    TOL = 1e-4

    def _check(self, build_loss, x0):
        analytic = autograd_gradient(build_loss, x0)
        numeric = finite_difference_gradient(lambda a: float(build_loss(torch.tensor(a))), x0, self.H)
        assert max_relative_error(analytic, numeric) < self.TOL

    def test_surrounding_l1_gradient(self):
        gen = np.random.default_rng(8)
        healthy = torch.tensor(gen.normal(0, 1, (6, 6)))
        mask = torch.tensor(gen.random((6, 6)) > 0.5)
        x0 = gen.normal(0, 1, (6, 6))
        # keep differences away from the |.| kink
        x0 += np.sign(x0 - healthy.numpy()) * 0.05
        self._check(lambda x: surrounding_l1(healthy, x, mask), x0)

    def test_cycle_gradient(self):
        gen = np.random.default_rng(9)
        x = torch.tensor(gen.normal(0, 1, (6, 6)))
        x0 = gen.normal(0, 1, (6, 6))
        x0 += np.sign(x0 - x.numpy()) * 0.05
        self._check(lambda r: cycle_consistency(x, r), x0)

    def test_adversarial_gradient(self):
        gen = np.random.default_rng(10)
        x0 = gen.normal(0.3, 0.4, (6, 6))
        self._check(lambda s: adversarial_mse(s, True), x0)
        self._check(lambda s: adversarial_mse(s, False), x0)

    def test_dice_focal_gradient(self):
        gen = np.random.default_rng(11)
        target = torch.tensor(gen.random((6, 6)) > 0.5)
        x0 = gen.uniform(0.1, 0.9, (6, 6))
        self._check(lambda p: dice_focal_loss(p, target), x0)
