"""Unit tests for diagnostics: error, length, autocorrelation and Jacobians."""

import csv

import pytest
import numpy as np
from scipy import fft

from flamefront.core.closure import closure_from_rho_beta, dispersion_omega, standard_grid
from flamefront.core.diagnostics import (
    DiagnosticsReport,
    ErrorCurve,
    JacobianResult,
    accumulated_error,
    analytic_dispersion,
    autocorrelation,
    compare_autodiff,
    front_length,
    front_slope,
    jacobian_diagonal_autodiff,
    measured_dispersion,
    modal_amplitudes,
    model_step,
    operator_jacobian,
    solver_step,
    write_report,
)
from flamefront.core.spectral import FrontState, mesh
from flamefront.nn.models import GammaInput, PfnoConfig, build_model
from flamefront.utils.errors import NonlinearityError, ParameterError, ShapeError, StorageError

N = 32


def spectral_filter(gains):
    def step(values):
        return fft.irfft(fft.rfft(values) * gains, n=values.shape[-1])
    return step


class TestFrontMetrics:
    """Test front length and slope."""

    def test_flat_front_has_unit_length(self):
        assert front_length(np.zeros(64)) == pytest.approx(1.0)
        assert front_length(FrontState(np.full(64, 2.5))) == pytest.approx(1.0)

    def test_cosine_front_length(self):
        assert front_length(np.cos(mesh(256))) == pytest.approx(1.2160, abs=1e-4)

    def test_length_of_every_row(self):
        rows = np.stack([np.zeros(64), np.cos(mesh(64))])
        lengths = front_length(rows)

        assert lengths.shape == (2,)
        assert lengths[0] == pytest.approx(1.0)

    def test_slope(self):
        x = mesh(64)

        assert np.allclose(front_slope(np.sin(3 * x)), 3 * np.cos(3 * x), atol=1e-12)


class TestAccumulatedError:
    """Test the per-step relative L2 curve."""

    def test_identical_sequences(self, rng):
        ref = rng.normal(size=(5, N))

        assert np.all(accumulated_error(ref, ref).values == 0.0)

    def test_zero_prediction_has_unit_error(self):
        curve = accumulated_error(np.zeros((3, N)), np.ones((3, N)))

        assert np.allclose(curve.values, 1.0)
        assert curve.horizon == 0

    def test_zero_reference(self):
        curve = accumulated_error(np.array([[0.0, 0.0], [1.0, 0.0]]), np.zeros((2, 2)))

        assert curve.values[0] == 0.0
        assert np.isinf(curve.values[1])

    def test_horizon(self):
        curve = ErrorCurve(np.array([0.0, 0.05, 0.09, 0.11, 0.02]))

        assert curve.horizon == 3
        assert curve.flagged.tolist() == [False, False, False, True, False]
        assert ErrorCurve(np.array([0.01, 0.02])).horizon is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            accumulated_error(np.zeros((3, N)), np.zeros((4, N)))


class TestAutocorrelation:
    """Test the spatial autocorrelation ratio."""

    def test_cosine_front(self):
        seq = np.tile(np.cos(mesh(64)), (6, 1))
        r, values = autocorrelation([seq, seq], window=(0, 4))

        assert values[0] == pytest.approx(1.0)
        assert np.allclose(values, np.cos(r), atol=1e-12)
        assert r[1] == pytest.approx(2 * np.pi / 64)

    def test_symmetric(self, rng):
        r, values = autocorrelation([rng.normal(size=(10, 64))], window=(2, 8))

        assert np.array_equal(values[1:], values[1:][::-1])
        assert values[0] == pytest.approx(1.0)

    def test_mean_handling(self):
        seq = np.tile(1.0 + np.cos(mesh(64)), (4, 1))
        r, removed = autocorrelation([seq], window=(0, 3))
        _, kept = autocorrelation([seq], window=(0, 3), remove_mean=False)

        assert np.allclose(removed, np.cos(r), atol=1e-12)
        assert np.allclose(kept, (1.0 + 0.5 * np.cos(r)) / 1.5, atol=1e-12)

    def test_flat_snapshots_are_skipped(self):
        seq = np.tile(np.cos(mesh(64)), (5, 1))
        seq[2] = 0.0
        r, values = autocorrelation([seq], window=(0, 4))

        assert np.allclose(values, np.cos(r), atol=1e-12)

    def test_all_flat_rejected(self):
        with pytest.raises(ParameterError):
            autocorrelation([np.zeros((5, 64))], window=(0, 4))

    def test_window_checks(self):
        seq = np.zeros((5, 64))
        with pytest.raises(ParameterError):
            autocorrelation([seq], window=(3, 3))
        with pytest.raises(ParameterError):
            autocorrelation([seq], window=(0, 5))
        with pytest.raises(ParameterError):
            autocorrelation([], window=(0, 2))


class TestJacobian:
    """Test the modal Jacobian about the flat front."""

    def test_modal_amplitudes(self):
        x = mesh(N)
        amplitudes = modal_amplitudes(2 * 0.3 * np.cos(5 * x) + 2 * 0.1 + 2 * 0.2 * np.cos(16 * x))

        assert amplitudes[5] == pytest.approx(0.3)
        assert amplitudes[0] == pytest.approx(0.1)
        assert amplitudes[16] == pytest.approx(0.2)

    def test_identity_map(self):
        result = operator_jacobian(lambda v: v.copy(), N)

        assert result.matrix.shape == (N // 2 + 1, N // 2 + 1)
        assert np.allclose(result.matrix, np.eye(N // 2 + 1), atol=1e-8)
        assert result.off_diagonal_ratio() < 1e-8

    def test_linear_filter(self):
        gains = np.linspace(0.5, 1.5, N // 2 + 1)
        result = operator_jacobian(spectral_filter(gains), N, kappas=[1, 4, 9])

        assert np.allclose(result.diagonal, gains[[1, 4, 9]], rtol=1e-7)
        assert result.matrix.shape == (N // 2 + 1, 3)

    def test_baseline_is_subtracted(self):
        offset = np.cos(3 * mesh(N))
        result = operator_jacobian(lambda v: v + offset, N, kappas=[2, 3])

        assert np.allclose(result.diagonal, [1.0, 1.0], rtol=1e-7)

    def test_nonlinear_map_rejected(self):
        with pytest.raises(NonlinearityError):
            operator_jacobian(lambda v: v + 1e11 * v ** 3, N, kappas=[2])

    def test_check_can_be_disabled(self):
        result = operator_jacobian(lambda v: v + 1e11 * v ** 3, N, kappas=[2], check=False)

        assert result.diagonal[0] > 1.0

    def test_invalid_arguments(self):
        with pytest.raises(ParameterError):
            operator_jacobian(lambda v: v, N, kappas=[N])
        with pytest.raises(ParameterError):
            operator_jacobian(lambda v: v, N, epsilon=0.0)

    def test_measured_dispersion_of_filter(self):
        dt = 0.15
        rates = -0.1 * np.arange(N // 2 + 1)
        kappas, omega, _ = measured_dispersion(spectral_filter(np.exp(rates * dt)), N, dt, kappas=[1, 2, 7])

        assert kappas.tolist() == [1, 2, 7]
        assert np.allclose(omega, rates[[1, 2, 7]], atol=1e-6)

    @pytest.mark.slow
    @pytest.mark.parametrize("rho,beta", standard_grid())
    def test_solver_matches_analytic_dispersion(self, rho, beta):
        params = closure_from_rho_beta(rho, beta)
        kappas = np.arange(1, int(np.floor(beta)) + 1)
        measured, omega, result = measured_dispersion(solver_step(params), 128, 0.15, kappas=kappas)

        assert measured.tolist() == kappas.tolist()
        assert np.allclose(omega, dispersion_omega(params, kappas), rtol=1e-3, atol=1e-4)
        assert result.off_diagonal_ratio() < 0.05

    def test_analytic_dispersion(self):
        params = closure_from_rho_beta(1.0, 10.0)

        assert np.allclose(analytic_dispersion(params, [0, 10]), [0.0, 0.0], atol=1e-12)


class TestAutodiffJacobian:
    """Test the reverse-mode Jacobian diagonal of a learned map."""

    @pytest.fixture
    def model(self):
        config = PfnoConfig(levels=2, channels=4, kappa_max=8, n_ratios=3, n=N, proj_hidden=8, ratio_hidden=4)
        return build_model('pfno', config, seed=3)

    def test_agrees_with_finite_difference(self, model):
        gamma = GammaInput(0.5, 10.0)
        result = operator_jacobian(model_step(model, gamma), N, kappas=[1, 2, 3, 5])

        gap = compare_autodiff(model, gamma, result)
        assert gap < 1e-3
        auto = jacobian_diagonal_autodiff(model, gamma, [1, 2, 3, 5])
        assert np.allclose(auto, result.diagonal, rtol=1e-3)

    def test_disagreement_raises(self, model):
        gamma = GammaInput(0.5, 10.0)
        fake = JacobianResult(kappas=np.array([1, 2]), kappa_bars=np.arange(N // 2 + 1),
                              matrix=np.full((N // 2 + 1, 2), 1e3), epsilon=1e-6)

        with pytest.raises(NonlinearityError):
            compare_autodiff(model, gamma, fake)


class TestReport:
    """Test CSV output of the diagnostics."""

    def test_writes_every_table(self, temp_dir):
        x = mesh(8)
        report = DiagnosticsReport(
            rho=0.5, beta=25.0, dt=0.15,
            error=ErrorCurve(np.array([0.0, 0.05, 0.2])),
            length_reference=np.array([1.0, 1.1, 1.2]),
            length_predicted=np.array([1.0, 1.05]),
            autocorr_r=np.array([0.0, 1.0]),
            autocorr_reference=np.array([1.0, 0.5]),
            dispersion_kappas=np.array([1, 2]),
            dispersion_analytic=np.array([0.1, 0.2]),
            dispersion_measured=np.array([0.11, 0.19]),
            jacobian=JacobianResult(np.array([1, 2]), np.arange(3), np.eye(3)[:, 1:], 1e-6),
            slopes={0: (np.sin(x), np.cos(x)), 50: (np.zeros(8), np.ones(8))},
        )
        written = write_report(report, temp_dir / "diag")

        assert sorted(p.name for p in written) == sorted(
            f"{d}_0.5_25.csv" for d in ('error', 'length', 'autocorr', 'dispersion', 'jacobian', 'slope'))

        with open(temp_dir / "diag" / "error_0.5_25.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['step', 'time', 'rel_l2', 'above_ceiling']
        assert rows[3] == ['2', '0.3', '0.2', 'True']

        with open(temp_dir / "diag" / "length_0.5_25.csv") as f:
            rows = list(csv.reader(f))
        assert rows[3][3] == 'nan'

        with open(temp_dir / "diag" / "slope_0.5_25.csv") as f:
            header = next(csv.reader(f))
        assert header == ['x', 'reference_step0', 'predicted_step0', 'reference_step50', 'predicted_step50']

        with open(temp_dir / "diag" / "jacobian_0.5_25.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['kappa_bar', 'k1', 'k2']
        assert rows[2] == ['1', '1', '0']

    def test_partial_report(self, temp_dir):
        report = DiagnosticsReport(rho=1.0, beta=10.0, dt=0.15,
                                   dispersion_kappas=np.array([1]),
                                   dispersion_analytic=np.array([0.1]),
                                   dispersion_measured=np.array([0.1]))

        assert [p.name for p in write_report(report, temp_dir)] == ["dispersion_1_10.csv"]

    def test_unwritable_directory(self, temp_dir):
        blocker = temp_dir / "file"
        blocker.write_text("x")
        report = DiagnosticsReport(rho=1.0, beta=10.0, dt=0.15)

        with pytest.raises(StorageError):
            write_report(report, blocker / "diag")
