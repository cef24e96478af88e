"""Unit tests for the adaptive time integrator."""

import pytest
import numpy as np
from scipy import fft

from flamefront.core.closure import closure_from_rho_beta, dispersion_omega, standard_grid
from flamefront.core.integrator import (
    DormandPrince,
    IntegratorConfig,
    iterate,
    simulate,
    step_to,
)
from flamefront.core.spectral import FrontState, mesh
from flamefront.utils.errors import BlowUpError, NumericalError, ParameterError, StepLimitError

N = 256
TIGHT = IntegratorConfig(abs_tol=1e-16, rel_tol=1e-10)


class TestIntegratorConfig:
    """Test integrator settings."""

    def test_defaults(self):
        config = IntegratorConfig()

        assert config.dt_out == 0.15
        assert config.to_dict()['abs_tol'] == 1e-9

    def test_rejects_non_positive_tolerances(self):
        with pytest.raises(ParameterError):
            IntegratorConfig(abs_tol=0.0)
        with pytest.raises(ParameterError):
            IntegratorConfig(dt_out=-0.1)


class TestStepping:
    """Test single steps and full simulations."""

    def test_flat_front_stays_flat(self):
        p = closure_from_rho_beta(0.5, 25.0)
        out = simulate(FrontState(np.zeros(N)), p, IntegratorConfig(), 10)

        assert out.states.shape == (11, N)
        assert np.all(out.states == 0.0)

    def test_zero_steps_returns_initial_state(self, rng):
        p = closure_from_rho_beta(1.0, 10.0)
        initial = FrontState(rng.uniform(0.0, 0.03, N))
        out = simulate(initial, p, IntegratorConfig(), 0)

        assert len(out) == 1
        assert np.array_equal(out.states[0], initial.values)
        assert out.failed_at is None

    def test_times_follow_output_interval(self):
        p = closure_from_rho_beta(0.0, 10.0)
        out = simulate(FrontState(np.zeros(N), t=1.5), p, IntegratorConfig(), 4, dt_out=0.5)

        assert np.allclose(out.times, [1.5, 2.0, 2.5, 3.0, 3.5])
        assert out.state(2).t == pytest.approx(2.5)

    def test_negative_step_count_rejected(self):
        p = closure_from_rho_beta(0.0, 10.0)
        with pytest.raises(NumericalError):
            simulate(FrontState(np.zeros(N)), p, IntegratorConfig(), -1)

    def test_step_to_requires_later_time(self):
        p = closure_from_rho_beta(0.0, 10.0)
        with pytest.raises(NumericalError):
            step_to(FrontState(np.zeros(N), t=1.0), p, IntegratorConfig(), 1.0)

    def test_step_to_lands_on_target(self, rng):
        p = closure_from_rho_beta(0.25, 10.0)
        out = step_to(FrontState(rng.uniform(0.0, 0.03, N)), p, IntegratorConfig(), 0.15)

        assert out.t == 0.15
        assert out.is_finite()

    def test_step_to_commutes_with_grid_shifts(self, rng):
        p = closure_from_rho_beta(0.75, 25.0)
        values = rng.uniform(0.0, 0.03, N)
        base = step_to(FrontState(values), p, IntegratorConfig(), 0.15).values

        for s in (1, 37, 128):
            shifted = step_to(FrontState(np.roll(values, s)), p, IntegratorConfig(), 0.15).values
            assert np.allclose(shifted, np.roll(base, s), atol=1e-10)

    @pytest.mark.slow
    @pytest.mark.parametrize("rho,beta", standard_grid())
    def test_small_modes_grow_at_dispersion_rate(self, rho, beta):
        p = closure_from_rho_beta(rho, beta)
        n = 128
        kappas = np.arange(1, int(np.floor(beta)) + 1)
        amplitude = 1e-8
        initial = amplitude * np.sum(np.cos(np.outer(kappas, mesh(n))), axis=0)
        out = simulate(FrontState(initial), p, TIGHT, 10)

        measured = np.abs(fft.rfft(out.states[-1])[kappas]) / np.abs(fft.rfft(initial)[kappas])
        expected = np.exp(dispersion_omega(p, kappas) * 10 * 0.15)
        assert np.allclose(measured, expected, rtol=0.01)

    def test_tolerance_self_convergence(self, rng):
        p = closure_from_rho_beta(0.75, 25.0)
        initial = FrontState(rng.uniform(0.0, 0.03, N))
        loose = simulate(initial, p, IntegratorConfig(abs_tol=1e-8, rel_tol=1e-6), 20)
        tight = simulate(initial, p, TIGHT, 20)

        diff = np.linalg.norm(loose.states[-1] - tight.states[-1])
        assert diff < 1e-4 * np.linalg.norm(tight.states[-1])

    def test_stepper_reuses_step_size(self, rng):
        p = closure_from_rho_beta(1.0, 10.0)
        stepper = DormandPrince(p, IntegratorConfig())
        y = stepper.advance(rng.uniform(0.0, 0.03, N), 0.0, 0.15)

        assert stepper.h is not None and stepper.h > 0
        assert stepper.steps_taken >= 1
        assert np.all(np.isfinite(stepper.advance(y, 0.15, 0.30)))


class TestFailures:
    """Test blow-up and step-budget handling."""

    def test_finite_time_singularity_raises_blow_up(self):
        p = closure_from_rho_beta(0.0, 10.0)
        stepper = DormandPrince(p, IntegratorConfig(), rhs_fn=lambda y, params: y * y)

        with pytest.raises(BlowUpError):
            stepper.advance(np.ones(N), 0.0, 2.0)

    def test_step_budget_exhausted(self):
        p = closure_from_rho_beta(0.0, 10.0)
        stepper = DormandPrince(p, IntegratorConfig(max_internal_steps=5),
                                rhs_fn=lambda y, params: -1e4 * y)

        with pytest.raises(StepLimitError):
            stepper.advance(np.ones(N), 0.0, 1.0)

    def test_iterate_reports_failing_step(self):
        p = closure_from_rho_beta(1.0, 10.0)
        # a large front driven by the quadratic term needs far more than one internal step
        config = IntegratorConfig(max_internal_steps=1)
        initial = FrontState(50.0 * np.cos(40 * mesh(N)))

        with pytest.raises(StepLimitError, match="Step 1"):
            list(iterate(initial, p, config, 3))
