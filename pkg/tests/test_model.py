import numpy as np
import pytest

from ratetip import default_params, model
from ratetip.errors import BracketInvalid, DivergedBeforeFinalTime
from ratetip.model import RampParams


RAMP_1 = RampParams(epsilon=1.0, lambda_max=3.0)
RAMP_125 = RampParams(epsilon=1.25, lambda_max=3.0)


class TestRamp:
    def test_value_at_zero(self):
        assert model.lambda_of_t(0.0, RAMP_1) == pytest.approx(1.5)

    def test_large_time_limit(self):
        assert model.lambda_of_t(1e3, RAMP_1) == pytest.approx(3.0)
        assert model.lambda_of_t(-1e3, RAMP_1) == pytest.approx(0.0, abs=1e-300)

    def test_direct_evaluation(self):
        # high-precision tanh: (3/2) (tanh(3/2) + 1)
        assert model.lambda_of_t(1.0, RAMP_1) == pytest.approx(2.857722380467300, rel=1e-12)

    def test_slope_at_zero(self):
        assert model.lambda_dot(0.0, RAMP_125) == pytest.approx(2.8125)

    def test_slope_decays(self):
        assert model.lambda_dot(50.0, RAMP_1) == pytest.approx(0.0, abs=1e-30)
        assert model.lambda_dot(-50.0, RAMP_1) == pytest.approx(0.0, abs=1e-30)

    def test_slope_identity_pointwise(self):
        lam = model.lambda_of_t(0.7, RAMP_1)
        assert model.lambda_dot(0.7, RAMP_1) == pytest.approx(
            1.0 * lam * (3.0 - lam), abs=1e-12)

    def test_slope_identity_random_times(self, rng):
        t = rng.uniform(-10, 10, 100)
        lam = model.lambda_of_t(t, RAMP_125)
        assert np.allclose(model.lambda_dot(t, RAMP_125),
                           model.ramp_rate(lam, RAMP_125), atol=1e-12)

    def test_monotone(self, rng):
        # strictly increasing where representable; saturates to the limits
        # in double precision far outside the ramp
        t = np.sort(rng.uniform(-10, 10, 50))
        assert np.all(np.diff(model.lambda_of_t(t, RAMP_125)) >= 0)
        t_mid = np.sort(rng.uniform(-4, 4, 50))
        assert np.all(np.diff(model.lambda_of_t(t_mid, RAMP_125)) > 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            RampParams(epsilon=0.0)
        with pytest.raises(ValueError):
            RampParams(epsilon=1.0, lambda_max=-1.0)


class TestDriftAndPotential:
    def test_equilibria(self):
        assert model.drift(-1.0, 0.0) == 0.0
        assert model.drift(1.0, 0.0) == 0.0
        assert model.drift(0.0, 0.0) == -1.0

    def test_gradient_identity(self, rng):
        x = rng.uniform(-5, 3, 100)
        lam = rng.uniform(0, 3, 100)
        assert np.allclose(model.potential_dx(x, lam), -model.drift(x, lam),
                           atol=1e-12)

    def test_reflection_evenness(self, rng):
        # point reflection through (-1.5, 1.5) reverses time, so the drift
        # field is even under it: drift(x, lam) = drift(-3 - x, 3 - lam)
        x = rng.uniform(-5, 3, 100)
        lam = rng.uniform(0, 3, 100)
        assert np.allclose(model.drift(x, lam), model.drift(-3 - x, 3 - lam),
                           rtol=1e-12, atol=1e-12)

    def test_curvature_at_pre_ramp_well(self):
        p = default_params()
        _, ux, uxx, ut = model.potential_terms(-1.0, -50.0, p)
        assert ux == pytest.approx(0.0, abs=1e-12)
        assert uxx == pytest.approx(2.0)   # decay rate at the pre-ramp well
        assert ut == pytest.approx(0.0, abs=1e-30)

    def test_time_derivative_finite_difference(self):
        p = default_params(epsilon=1.25)
        x, t, h = -1.2, 0.0, 1e-5
        u_p = model.potential(x, model.lambda_of_t(t + h, p.ramp))
        u_m = model.potential(x, model.lambda_of_t(t - h, p.ramp))
        _, _, _, ut = model.potential_terms(x, t, p)
        assert ut == pytest.approx((u_p - u_m) / (2 * h), abs=1e-8)


class TestEffectivePotential:
    def test_stationary_well_value(self):
        p = default_params()
        # at the pre-ramp well: gradient zero, curvature 2, no drift of U
        assert model.effective_potential_at_time(-1.0, -50.0, p) == pytest.approx(-1.0)

    def test_polynomial_expansion_agreement(self, rng):
        # closed form against the expanded polynomial form
        p = default_params(epsilon=1.25)
        for _ in range(100):
            x = rng.uniform(-4, 3)
            lam = rng.uniform(0, 3)
            poly = (x**4 + 4 * lam**2 * x**2 + (1 - lam**2) ** 2 + 4 * lam * x**3
                    - 2 * x * (x + 2 * lam) * (1 - lam**2)) / (4 * p.D) \
                + x + lam \
                + p.epsilon * lam * x * (3.0 - lam) * (x + 2 * lam) / (2 * p.D)
            val = model.effective_potential(x, lam, p.ramp, p.D)
            assert val == pytest.approx(poly, rel=1e-10)

    def test_gradient_scaling_in_noise(self):
        # the squared-gradient term doubles when D halves (frozen ramp level)
        ramp = RAMP_125
        x, lam = 0.7, 0.0  # ramp_rate vanishes at lam = 0
        v1 = model.effective_potential(x, lam, ramp, 0.01)
        v2 = model.effective_potential(x, lam, ramp, 0.005)
        uxx = model.potential_dxx(x, lam)
        assert v2 + uxx / 2 == pytest.approx(2 * (v1 + uxx / 2), rel=1e-12)


class TestEffectiveForce:
    def test_matches_finite_difference(self):
        p = default_params(epsilon=1.25)
        x, t = -0.8, 0.4
        h = 1e-6
        fd = (model.effective_potential_at_time(x + h, t, p)
              - model.effective_potential_at_time(x - h, t, p)) / (2 * h)
        assert model.effective_force_at_time(x, t, p) == pytest.approx(
            2 * p.D * fd, abs=1e-7)

    def test_frozen_well_value(self):
        # gradient term vanishes at the well; the constant curvature term
        # leaves exactly 2D
        D = 0.008
        assert model.effective_force(-1.0, 0.0, RAMP_125, D) == pytest.approx(2 * D)

    def test_reflection_antisymmetry_of_forcing(self, rng):
        # h(x, lam) - 2D is odd under the point reflection; the constant 2D
        # offset (from the third x-derivative of the potential) is even
        D = 0.008
        for _ in range(5):
            x = rng.uniform(-4, 2)
            lam = rng.uniform(0, 3)
            a = model.effective_force(x, lam, RAMP_125, D)
            b = model.effective_force(-3 - x, 3 - lam, RAMP_125, D)
            assert a + b == pytest.approx(4 * D, rel=1e-9, abs=1e-12)

    def test_finite_difference_sweep(self, rng):
        p = default_params(epsilon=1.25)
        h = 1e-6
        for _ in range(100):
            x = rng.uniform(-4, 3)
            t = rng.uniform(-5, 5)
            fd = (model.effective_potential_at_time(x + h, t, p)
                  - model.effective_potential_at_time(x - h, t, p)) / (2 * h)
            assert model.effective_force_at_time(x, t, p) == pytest.approx(
                2 * p.D * fd, abs=1e-6 * max(1, abs(fd)))


class TestRampRate:
    def test_fixed_points(self):
        assert model.ramp_rate(0.0, RAMP_125) == 0.0
        assert model.ramp_rate(3.0, RAMP_125) == 0.0

    def test_maximum_matches_slope_peak(self):
        assert model.ramp_rate(1.5, RAMP_125) == pytest.approx(2.8125)


class TestEquilibria:
    def test_drift_vanishes(self):
        eq = model.equilibria(RAMP_125)
        for x, lam in (eq.s_minus, eq.u_minus, eq.s_plus, eq.u_plus):
            assert abs(model.drift(x, lam)) < 1e-12

    def test_locations(self):
        eq = model.equilibria(RAMP_125)
        assert eq.s_minus == (-1.0, 0.0)
        assert eq.u_plus == (-2.0, 3.0)


class TestDeterministicTrajectory:
    def test_subcritical_converges_to_post_ramp_sink(self):
        p = default_params(epsilon=1.25)
        tr = model.deterministic_trajectory(-1.0, -10.0, 10.0, p)
        assert tr.states[-1] == pytest.approx(-4.0, abs=1e-3)

    def test_supercritical_diverges(self):
        p = default_params(epsilon=1.4)
        with pytest.raises(DivergedBeforeFinalTime):
            model.deterministic_trajectory(-1.0, -10.0, 10.0, p)

    def test_connecting_orbit_is_a_line(self):
        p = default_params(epsilon=4.0 / 3.0)
        tr = model.deterministic_trajectory(-1.0, -10.0, 10.0, p)
        lam = model.lambda_of_t(tr.times, p.ramp)
        sel = (lam >= 0.1) & (lam <= 2.9)
        assert np.max(np.abs(tr.states[sel] + lam[sel] / 3 + 1)) < 1e-3


class TestStableManifold:
    def test_endpoint_at_post_ramp_saddle(self):
        p = default_params(epsilon=1.25)
        ws = model.stable_manifold_ws_uplus(p)
        assert ws.states[-1] == pytest.approx(-2.0, abs=1e-4)

    def test_connecting_orbit_at_critical_speed(self):
        p = default_params(epsilon=4.0 / 3.0)
        ws = model.stable_manifold_ws_uplus(p)
        lam = model.lambda_of_t(ws.times, p.ramp)
        sel = (lam >= 0.1) & (lam <= 2.9)
        assert np.max(np.abs(ws.states[sel] + lam[sel] / 3 + 1)) < 1e-3

    def test_minimum_gap_at_ramp_midpoint(self):
        p = default_params(epsilon=1.25)
        wu = model.unstable_manifold_wu_sminus(p)
        ws = model.stable_manifold_ws_uplus(p)
        gap = ws.states - wu.states
        t_min = wu.times[np.argmin(gap)]
        assert abs(t_min) <= 0.05
        assert np.all(gap > 0)


class TestCriticalEpsilon:
    def test_value(self):
        eps_c = model.find_critical_epsilon(3.0, tol=1e-4)
        assert eps_c == pytest.approx(4.0 / 3.0, abs=1e-4)

    def test_invalid_bracket(self):
        with pytest.raises(BracketInvalid):
            model.find_critical_epsilon(3.0, tol=1e-3, bracket=(1.4, 1.5))

    def test_classification_monotone(self):
        p_low = default_params(epsilon=1.2)
        model.deterministic_trajectory(-1.0, -10.0, 30.0, p_low)  # no raise
        with pytest.raises(DivergedBeforeFinalTime):
            model.deterministic_trajectory(
                -1.0, -10.0, 30.0, default_params(epsilon=1.45))

    def test_tolerance_halving_stability(self):
        a = model.find_critical_epsilon(3.0, tol=5e-4)
        b = model.find_critical_epsilon(3.0, tol=5e-4,
                                        rtol=5e-11, atol=5e-11)
        assert abs(a - b) <= 2 * 5e-4
