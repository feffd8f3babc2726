import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskfill.schedule import (
    NoiseSchedule,
    alpha_sigma,
    forward_corrupt,
    ode_step,
    renoise,
    time_grid,
    tweedie_score,
)

S = NoiseSchedule()


class TestAlphaSigma:
    def test_symmetry_point(self):
        a, s = alpha_sigma(S, 0.5)
        assert a == pytest.approx(math.sqrt(0.5))
        assert s == pytest.approx(math.sqrt(0.5))

    def test_pure_noise_endpoint(self):
        assert alpha_sigma(S, 1.0) == (0.0, 1.0)

    def test_hand_value(self):
        a, s = alpha_sigma(S, 0.36)
        assert a == pytest.approx(0.8, abs=1e-15)
        assert s == pytest.approx(0.6, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            alpha_sigma(S, 0.0)
        with pytest.raises(ValueError):
            alpha_sigma(S, 1.5)

    def test_unit_circle_identity_dense(self):
        for t in np.linspace(S.t_min, 1.0, 1000):
            a, s = alpha_sigma(S, float(t))
            assert abs(a * a + s * s - 1.0) <= 1e-12

    def test_monotone(self):
        ts = np.linspace(S.t_min, 1.0, 1000)
        alphas, sigmas = zip(*(alpha_sigma(S, float(t)) for t in ts))
        assert all(a1 >= a2 for a1, a2 in zip(alphas, alphas[1:]))
        assert all(s1 <= s2 for s1, s2 in zip(sigmas, sigmas[1:]))


class TestForwardCorrupt:
    def test_hand_value(self):
        out = forward_corrupt(S, np.array([2.0]), 0.36, np.array([1.0]))
        assert out[0] == pytest.approx(2.2, abs=1e-12)

    def test_noiseless_limit(self):
        x0 = np.array([3.0, -1.0])
        out = forward_corrupt(S, x0, S.t_min, np.zeros(2))
        assert np.allclose(out, x0 * math.sqrt(1 - S.t_min))

    def test_gaussian_moments(self):
        # independent oracle: at x0=0 the marginal is N(0, sigma_t^2)
        gen = np.random.default_rng(0)
        n = 100_000
        draws = forward_corrupt(S, np.zeros(n), 0.5, gen.standard_normal(n))
        band = 3.0 / math.sqrt(n)
        assert abs(draws.mean()) <= band * math.sqrt(0.5)
        # var of the sample variance of N(0, v) is 2v^2/n
        assert abs(draws.var() - 0.5) <= 3.0 * math.sqrt(2.0 * 0.25 / n)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            forward_corrupt(S, np.zeros(2), 0.5, np.zeros(3))


class TestOdeStep:
    def test_fixed_point(self):
        x = np.array([1.0, -2.0, 1e-30])
        out = ode_step(S, x, np.array([5.0, 5.0, 5.0]), 0.7, 0.7)
        assert np.array_equal(out, x)

    def test_consistent_prediction_transports_noise(self):
        # substitute x_t = a x0 + s e and simplify: result must be a' x0 + s' e
        gen = np.random.default_rng(1)
        x0 = gen.standard_normal(16)
        eps = gen.standard_normal(16)
        t, t_next = 0.8, 0.3
        x_t = forward_corrupt(S, x0, t, eps)
        out = ode_step(S, x_t, x0, t, t_next)
        expected = forward_corrupt(S, x0, t_next, eps)
        assert np.allclose(out, expected, atol=1e-12)

    def test_hand_value(self):
        out = ode_step(S, np.array([2.2]), np.array([2.0]), 0.36, 0.04)
        expected = math.sqrt(0.96) * 2.0 + 0.2 * (2.2 - 1.6) / 0.6
        assert out[0] == pytest.approx(expected, abs=1e-12)
        assert out[0] == pytest.approx(2.1595917942, abs=1e-9)

    def test_refinement_converges_to_single_step(self):
        # deterministic linear ODE: composing over a refinement telescopes
        gen = np.random.default_rng(2)
        x = gen.standard_normal(8)
        x0 = gen.standard_normal(8)
        single = ode_step(S, x, x0, 0.9, 0.1)
        ts = np.linspace(0.9, 0.1, 65)
        composed = x
        for a, b in zip(ts, ts[1:]):
            composed = ode_step(S, composed, x0, float(a), float(b))
        assert np.allclose(composed, single, atol=1e-9)

    def test_printed_variant_differs_and_is_not_identity(self):
        x = np.array([1.0])
        x0 = np.array([0.5])
        out = ode_step(S, x, x0, 0.5, 0.4, printed_variant=True)
        std = ode_step(S, x, x0, 0.5, 0.4)
        assert out[0] != pytest.approx(std[0])

    def test_step_to_exact_zero_returns_prediction(self):
        x0 = np.array([1.5, -0.5])
        out = ode_step(S, np.array([9.9, 9.9]), x0, 0.5, 0.0)
        assert np.allclose(out, x0)

    def test_rejects_upward_step(self):
        with pytest.raises(ValueError):
            ode_step(S, np.zeros(1), np.zeros(1), 0.5, 0.6)


class TestRenoise:
    def test_identity_at_same_time(self):
        x = np.array([1.0, 2.0])
        out = renoise(S, x, 0.3, 0.3, np.array([9.0, 9.0]))
        assert np.array_equal(out, x)

    def test_matches_forward_corrupt_from_clean(self):
        # from t=0 the formula reduces exactly to forward corruption
        gen = np.random.default_rng(3)
        x0 = gen.standard_normal(32)
        eps = gen.standard_normal(32)
        out = renoise(S, x0, 0.0, 0.75, eps)
        assert np.allclose(out, forward_corrupt(S, x0, 0.75, eps), atol=1e-14)

    def test_marginal_variance(self):
        # law of total variance: renoising a t=0.25 marginal of x0=0 up to
        # t=0.75 must give variance 0.75
        gen = np.random.default_rng(4)
        n = 100_000
        x_t = forward_corrupt(S, np.zeros(n), 0.25, gen.standard_normal(n))
        x_up = renoise(S, x_t, 0.25, 0.75, gen.standard_normal(n))
        assert abs(x_up.var() - 0.75) <= 3.0 * math.sqrt(2.0 * 0.75**2 / n)

    def test_deterministic_up_down_round_trip(self):
        # re-noising along the implied noise direction then stepping back
        # down with the exact prediction cancels algebraically
        gen = np.random.default_rng(5)
        x0 = gen.standard_normal(16)
        eps = gen.standard_normal(16)
        t, t_up = 0.3, 0.9
        x_t = forward_corrupt(S, x0, t, eps)
        x_up = forward_corrupt(S, x0, t_up, eps)  # deterministic jump, same direction
        back = ode_step(S, x_up, x0, t_up, t)
        assert np.allclose(back, x_t, atol=1e-10)

    def test_stochastic_renoise_inverts_exactly(self):
        # renoise is affine in (x_t, eps); undoing it recovers x_t to 1e-10
        gen = np.random.default_rng(6)
        x_t = gen.standard_normal(16)
        eps = gen.standard_normal(16)
        t, t_up = 0.25, 0.8
        x_up = renoise(S, x_t, t, t_up, eps)
        ratio = math.sqrt(1 - t_up) / math.sqrt(1 - t)
        rad = t_up - ratio**2 * t
        recovered = (x_up - math.sqrt(rad) * eps) / ratio
        assert np.allclose(recovered, x_t, atol=1e-10)

    def test_rejects_downward(self):
        with pytest.raises(ValueError):
            renoise(S, np.zeros(1), 0.5, 0.4, np.zeros(1))


class TestTweedieScore:
    def test_zero_at_consistent_noiseless_point(self):
        e = np.array([1.0, 0.0])
        t = 0.36
        x = 0.8 * 4.0 * e
        out = tweedie_score(S, x, e, t, 4.0)
        assert np.allclose(out, 0.0)

    def test_hand_value(self):
        out = tweedie_score(S, np.array([1.2]), np.array([1.0]), 0.64, 4.0)
        assert out[0] == pytest.approx((0.6 * 4.0 - 1.2) / 0.64, abs=1e-12)
        assert out[0] == pytest.approx(1.875, abs=1e-12)

    def test_single_atom_analytic_score(self):
        # closed form: for p_t = N(alpha*mu, sigma^2), score = (alpha*mu - x)/sigma^2
        gen = np.random.default_rng(7)
        mu = 4.0 * np.array([1.0, 0.0, 1.0])
        e_atom = mu / 4.0
        for t in (0.2, 0.5, 0.8):
            x = forward_corrupt(S, mu, t, gen.standard_normal(3))
            a, s = alpha_sigma(S, t)
            analytic = (a * mu - x) / s**2
            assert np.allclose(tweedie_score(S, x, e_atom, t, 4.0), analytic, atol=1e-12)

    def test_rejects_out_of_range_probabilities(self):
        with pytest.raises(ValueError, match="outside"):
            tweedie_score(S, np.zeros(1), np.array([1.5]), 0.5, 4.0)


class TestTimeGrid:
    def test_endpoints_and_monotone(self):
        ts = time_grid(S, 15)
        assert ts[0] == 1.0
        assert ts[-1] == S.t_min
        assert len(ts) == 16
        assert np.all(np.diff(ts) < 0)

    @given(st.integers(1, 60))
    @settings(max_examples=20, deadline=None)
    def test_uniform_spacing(self, n):
        ts = time_grid(S, n)
        gaps = np.diff(ts)
        assert np.allclose(gaps, gaps[0])
