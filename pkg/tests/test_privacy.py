import logging
import math

import numpy as np
import pytest
from scipy import stats

from scripts.dpfair.errors import PrivacyError
from scripts.dpfair.model import BatchGrads, PerExampleGrad, batch_grads, init_params
from scripts.dpfair.privacy import (
    ClipBounds,
    accounting_multiplier,
    add_noise,
    calibrate_noise,
    check_delta,
    clip,
    clip_batch,
    clip_uniform,
    compute_epsilon,
    noise_group_sums,
    privacy_spec_for,
    rdp_epsilon,
    rdp_orders,
    sanitize,
)


def _grad(user: np.ndarray, item: np.ndarray, w: np.ndarray = np.zeros(0)) -> PerExampleGrad:
    return PerExampleGrad(user_row=0, user_part=user, item_rows=(1, 2), item_part=item, w_part=w)


class TestClip:
    def test_norm_never_exceeds_bound(self, rng):
        for _ in range(10_000):
            d = int(rng.integers(1, 20))
            g = rng.normal(size=d) * 10.0 ** rng.uniform(-3, 3)
            C = 10.0 ** rng.uniform(-2, 2)
            assert np.linalg.norm(clip(g, C)) <= C

    def test_identity_inside_the_ball(self):
        g = np.array([0.3, -0.4])
        np.testing.assert_array_equal(clip(g, 1.0), g)
        np.testing.assert_array_equal(clip(g, math.inf), g)

    def test_keeps_direction(self, rng):
        g = rng.normal(size=7) * 50
        out = clip(g, 0.5)
        np.testing.assert_allclose(out / np.linalg.norm(out), g / np.linalg.norm(g))
        assert np.linalg.norm(out) == pytest.approx(0.5)

    def test_nonpositive_bound(self):
        with pytest.raises(PrivacyError):
            clip(np.ones(2), 0.0)
        with pytest.raises(PrivacyError):
            ClipBounds(1.0, -1.0, 1.0)


class TestNoise:
    def test_gaussian_with_requested_scale(self):
        noisy = add_noise(np.zeros(20_000), 0.5, np.random.default_rng(3))
        assert abs(noisy.mean()) < 0.02
        assert noisy.std() == pytest.approx(0.5, rel=0.03)
        assert stats.kstest(noisy, stats.norm(0.0, 0.5).cdf).pvalue > 1e-3

    def test_zero_sigma_copies_without_drawing(self):
        rng = np.random.default_rng(0)
        before = rng.bit_generator.state
        g = np.array([1.0, 2.0])
        out = add_noise(g, 0.0, rng)
        np.testing.assert_array_equal(out, g)
        assert out is not g
        assert rng.bit_generator.state == before

    def test_negative_sigma(self, rng):
        with pytest.raises(PrivacyError):
            add_noise(np.zeros(2), -1.0, rng)

    def test_group_sums_get_their_own_scale(self):
        bounds = ClipBounds(0.5, 2.0, 1.0)
        noisy_u, noisy_v, noisy_w = noise_group_sums(
            np.zeros((200, 5)), np.zeros((300, 5)), np.zeros(2_000), bounds, 1.5, np.random.default_rng(8)
        )
        assert noisy_u.std() == pytest.approx(0.75, rel=0.1)
        assert noisy_v.std() == pytest.approx(3.0, rel=0.1)
        assert noisy_w.std() == pytest.approx(1.5, rel=0.1)

    def test_infinite_bound_with_noise(self, rng):
        grad = _grad(np.ones(2), np.ones((2, 2)))
        with pytest.raises(PrivacyError):
            sanitize(grad, ClipBounds.unbounded(), 1.0, rng)


class TestSeparateClipping:
    def test_differs_from_uniform_when_both_groups_are_nonzero(self, rng):
        C = 1.0
        user = np.array([2.0 * C, 0.0])
        item = np.array([[0.0, C / 2], [0.0, 0.0]])
        separate = sanitize(_grad(user, item), ClipBounds.uniform(C), 0.0, rng)
        uniform = clip_uniform(_grad(user, item), C)
        assert np.linalg.norm(separate.user_part) == pytest.approx(C)
        np.testing.assert_allclose(separate.item_part, item)
        assert np.linalg.norm(uniform.item_part) == pytest.approx(C / 2 / math.sqrt(4.25))
        assert not np.allclose(separate.item_part, uniform.item_part)

    def test_coincides_with_uniform_when_items_have_no_gradient(self, rng):
        C = 1.0
        user = np.array([2.0 * C, 0.0])
        item = np.zeros((2, 2))
        separate = sanitize(_grad(user, item), ClipBounds.uniform(C), 0.0, rng)
        uniform = clip_uniform(_grad(user, item), C)
        np.testing.assert_allclose(separate.flat(), uniform.flat())

    def test_batch_clipping_matches_per_example(self, rng):
        params = init_params(5, 9, 4, "neumf", rng)
        params.U *= 20.0
        users, pos, neg = np.array([0, 1, 4]), np.array([2, 3, 8]), np.array([1, 0, 7])
        grads = batch_grads(params, users, pos, neg, 0.0)
        bounds = ClipBounds(0.2, 0.3, 0.1)
        clipped, norms = clip_batch(grads, bounds)
        for i in range(len(users)):
            single = _grad(grads.user[i], np.stack([grads.pos[i], grads.neg[i]]), grads.w[i])
            expected = sanitize(single, bounds, 0.0, rng)
            np.testing.assert_allclose(clipped.user[i], expected.user_part)
            np.testing.assert_allclose(clipped.pos[i], expected.item_part[0])
            np.testing.assert_allclose(clipped.neg[i], expected.item_part[1])
            np.testing.assert_allclose(clipped.w[i], expected.w_part)
            assert norms.user[i] == pytest.approx(np.linalg.norm(grads.user[i]))

    def test_batch_without_extra_weights(self):
        grads = BatchGrads(
            loss=np.zeros(2), user=np.ones((2, 3)), pos=np.ones((2, 3)), neg=np.ones((2, 3)), w=np.zeros((2, 0))
        )
        clipped, norms = clip_batch(grads, ClipBounds.uniform(1.0))
        np.testing.assert_array_equal(norms.w, [0.0, 0.0])
        assert clipped.w.shape == (2, 0)


class TestAccountant:
    def test_full_batch_single_step(self):
        report = compute_epsilon(1.0, 1.0, 1, 1e-5)
        assert report.epsilon == pytest.approx(5.30, abs=0.02)
        assert report.optimal_order == 6

    def test_second_order_closed_form(self):
        q, sigma = 0.05, 1.3
        rho = rdp_orders(q, sigma, orders=[2])
        assert rho[0] == pytest.approx(math.log1p(q**2 * math.expm1(1.0 / sigma**2)))

    def test_monotone_in_noise_steps_and_rate(self):
        base = rdp_epsilon(1.0, 0.01, 1_000, 1e-5)
        assert rdp_epsilon(2.0, 0.01, 1_000, 1e-5) < base
        assert rdp_epsilon(1.0, 0.01, 2_000, 1e-5) > base
        assert rdp_epsilon(1.0, 0.02, 1_000, 1e-5) > base

    def test_zero_noise_is_not_private(self):
        report = compute_epsilon(0.0, 0.1, 10, 1e-5)
        assert math.isinf(report.epsilon) and report.optimal_order is None

    @pytest.mark.parametrize("z,q,T,delta", [(-1.0, 0.1, 1, 1e-5), (1.0, 0.0, 1, 1e-5), (1.0, 0.1, 0, 1e-5), (1.0, 0.1, 1, 1.0)])
    def test_rejects_bad_arguments(self, z, q, T, delta):
        with pytest.raises(PrivacyError):
            compute_epsilon(z, q, T, delta)


class TestCalibration:
    def test_roundtrip_lands_just_under_target(self):
        z = calibrate_noise(2.0, 1e-5, 0.01, 1_000)
        eps = rdp_epsilon(z, 0.01, 1_000, 1e-5)
        assert eps <= 2.0
        assert eps == pytest.approx(2.0, abs=0.05)

    def test_unreachable_target(self):
        with pytest.raises(PrivacyError):
            calibrate_noise(1e-6, 1e-5, 1.0, 1_000)

    def test_spec_charges_the_group_count(self):
        spec = privacy_spec_for(None, 2.0, 1e-5, 0.01, 1_000, groups=2)
        assert spec.noise_multiplier == pytest.approx(math.sqrt(2) * spec.accounting_multiplier)
        assert spec.epsilon <= 2.0
        assert spec.certificate()["groups"] == 2

    def test_spec_from_fixed_multiplier(self):
        spec = privacy_spec_for(1.5, None, 1e-5, 0.01, 100, groups=3)
        assert spec.accounting_multiplier == pytest.approx(accounting_multiplier(1.5, 3))
        assert spec.epsilon == pytest.approx(rdp_epsilon(1.5 / math.sqrt(3), 0.01, 100, 1e-5))

    def test_infinite_target_means_no_noise(self):
        spec = privacy_spec_for(None, math.inf, 1e-5, 0.01, 100, groups=2)
        assert spec.noise_multiplier == 0.0 and not spec.is_private
        assert math.isinf(spec.epsilon)

    def test_needs_z_or_target(self):
        with pytest.raises(PrivacyError):
            privacy_spec_for(None, None, 1e-5, 0.01, 100, groups=2)

    def test_edge_order_warning_is_logged_once(self, caplog):
        # the calibrated z is about 0.19, where order 2 is optimal
        with caplog.at_level(logging.WARNING, logger="scripts.dpfair.privacy"):
            spec = privacy_spec_for(None, 40.0, 1e-5, 1.0, 1, groups=1)
        assert spec.optimal_order == 2
        edge = [r for r in caplog.records if "edge of the order grid" in r.getMessage()]
        assert len(edge) == 1

    def test_bare_epsilon_is_quiet(self, caplog):
        with caplog.at_level(logging.WARNING, logger="scripts.dpfair.privacy"):
            assert rdp_epsilon(1.0, 1.0, 1, 1e-5, orders=[2, 3]) > 0
            report = compute_epsilon(1.0, 1.0, 1, 1e-5, orders=[2, 3])
        assert report.optimal_order == 3
        assert len(caplog.records) == 1


def test_delta_must_be_below_one_over_n():
    check_delta(1e-3, 100)
    with pytest.raises(PrivacyError):
        check_delta(0.02, 100)
