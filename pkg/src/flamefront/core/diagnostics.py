"""Evaluation quantities for reference and predicted front sequences."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from .closure import SolverParams, dispersion_omega
from .integrator import DormandPrince, IntegratorConfig
from .spectral import FrontState, derivative, mesh
from ..nn import functional as F
from ..nn.models import GammaInput, OperatorModel
from ..nn.tensor import Tensor, grad
from ..utils.errors import NonlinearityError, ParameterError, ShapeError, StorageError

logger = logging.getLogger(__name__)

ERROR_CEILING = 0.1
SLOPE_STEPS = (0, 50, 125, 250, 500, 750, 1000, 1250, 1500, 1750, 2000)
RICHARDSON_TOLERANCE = 0.01
AUTODIFF_TOLERANCE = 1e-3

StepFn = Callable[[np.ndarray], np.ndarray]


def _values(state) -> np.ndarray:
    return state.values if isinstance(state, FrontState) else np.asarray(state, dtype=np.float64)


def front_slope(state) -> np.ndarray:
    """Spectral slope phi_x of a state, or of every row of a (T, N) array."""
    return derivative(_values(state), order=1)


def front_length(state):
    """Normalized total front length (1/2pi) * integral of sqrt(1 + phi_x^2).

    The trapezoid rule on the periodic mesh reduces to the sample mean.
    Accepts a FrontState, an (N,) array or a (T, N) array (one value per row).
    """
    values = _values(state)
    lengths = np.mean(np.sqrt(1.0 + front_slope(values) ** 2), axis=-1)
    return float(lengths) if np.ndim(lengths) == 0 else lengths


@dataclass
class ErrorCurve:
    """Relative L2 error of a prediction against the reference at every index."""
    values: np.ndarray
    ceiling: float = ERROR_CEILING

    @property
    def flagged(self) -> np.ndarray:
        return self.values > self.ceiling

    @property
    def horizon(self) -> Optional[int]:
        """First index whose error exceeds the ceiling, or None."""
        above = np.flatnonzero(self.flagged)
        return int(above[0]) if above.size else None


def accumulated_error(predicted: np.ndarray, reference: np.ndarray) -> ErrorCurve:
    """Per-index ||predicted - reference|| / ||reference||.

    Raises:
        ShapeError: If the sequences differ in length or mesh
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise ShapeError(f"Predicted {predicted.shape} and reference {reference.shape} differ")

    diff = np.sqrt(np.sum((predicted - reference) ** 2, axis=-1))
    norm = np.sqrt(np.sum(reference ** 2, axis=-1))
    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.where(norm > 0.0, diff / np.where(norm > 0.0, norm, 1.0),
                          np.where(diff > 0.0, np.inf, 0.0))
    return ErrorCurve(values=values)


def autocorrelation(sequences: Sequence[np.ndarray], window: Tuple[int, int] = (1000, 4000),
                    remove_mean: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Spatial autocorrelation ratio averaged over snapshots and sequences.

    For every snapshot with index in (window[0], window[1]] the circular
    correlation of phi* with itself, divided by its value at zero offset,
    is computed through the power spectrum.

    Args:
        sequences: Arrays of shape (T, N), each reaching index window[1]
        window: Half-open snapshot index range (lo, hi]
        remove_mean: Subtract the spatial mean of every snapshot first

    Returns:
        (offsets r_k = k * 2pi / N, R(r_k)) with R(0) = 1 and R(r) = R(-r)

    Raises:
        ParameterError: If the window is empty or a sequence is too short
    """
    lo, hi = int(window[0]), int(window[1])
    if not 0 <= lo < hi:
        raise ParameterError(f"Invalid autocorrelation window ({lo}, {hi}]")
    if not sequences:
        raise ParameterError("autocorrelation needs at least one sequence")

    total = None
    count = 0
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        if len(seq) <= hi:
            raise ParameterError(f"Sequence of length {len(seq)} does not reach window index {hi}")
        snaps = seq[lo + 1:hi + 1]
        if remove_mean:
            snaps = snaps - snaps.mean(axis=-1, keepdims=True)
        power = np.abs(fft.rfft(snaps, axis=-1)) ** 2
        corr = fft.irfft(power, n=snaps.shape[-1], axis=-1)
        usable = corr[:, 0] > 0.0
        if not np.all(usable):
            logger.debug(f"Skipping {int(np.sum(~usable))} flat snapshots")
        ratios = corr[usable] / corr[usable, :1]
        total = ratios.sum(axis=0) if total is None else total + ratios.sum(axis=0)
        count += int(np.sum(usable))

    if count == 0:
        raise ParameterError("Every snapshot in the window is flat; autocorrelation undefined")

    mean = total / count
    # pair r with -r exactly
    mirrored = np.roll(mean[::-1], 1)
    values = 0.5 * (mean + mirrored)
    n = values.size
    return 2.0 * np.pi * np.arange(n) / n, values


@dataclass
class JacobianResult:
    """J(kappa_bar, kappa): modal response in row kappa_bar to forcing mode kappa."""
    kappas: np.ndarray
    kappa_bars: np.ndarray
    matrix: np.ndarray
    epsilon: float

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix[self.kappas, np.arange(len(self.kappas))]

    def off_diagonal_ratio(self) -> float:
        """Largest off-diagonal magnitude relative to the largest diagonal entry."""
        masked = self.matrix.copy()
        masked[self.kappas, np.arange(len(self.kappas))] = 0.0
        peak = np.max(np.abs(self.diagonal))
        return float(np.max(np.abs(masked)) / peak) if peak > 0 else float('inf')


def modal_amplitudes(values: np.ndarray) -> np.ndarray:
    """Cosine amplitude of every real-FFT mode: identity maps 2e cos(kx) to e."""
    n = values.shape[-1]
    scale = np.full(n // 2 + 1, 1.0 / n)
    scale[0] = scale[-1] = 1.0 / (2 * n)
    return np.abs(fft.rfft(values, axis=-1)) * scale


def _cosine_forcing(kappa: int, n: int) -> np.ndarray:
    return 2.0 * np.cos(kappa * mesh(n))


def _fd_column(step: StepFn, kappa: int, n: int, epsilon: float, baseline: np.ndarray) -> np.ndarray:
    forcing = _cosine_forcing(kappa, n)
    upper = modal_amplitudes(step(1.5 * epsilon * forcing) - baseline)
    lower = modal_amplitudes(step(0.5 * epsilon * forcing) - baseline)
    return (upper - lower) / epsilon


def operator_jacobian(step: StepFn, n: int, kappas: Optional[Sequence[int]] = None,
                      epsilon: float = 1e-6, check: bool = True) -> JacobianResult:
    """Modal Jacobian of a one-step map about the flat front.

    Column kappa is d/de |F_kbar(G(2e cos(kappa x)) - G(0))|, by a centred
    difference of half-width epsilon/2 around e = epsilon. With check on,
    the diagonal is recomputed at epsilon/2 and must agree within 1%.

    Args:
        step: One-step map on (N,) arrays (solver step or learned model)
        n: Mesh size
        kappas: Forcing modes (default 0..N/2)
        epsilon: Perturbation amplitude
        check: Run the epsilon/2 consistency check

    Raises:
        NonlinearityError: If the epsilon/2 diagonal disagrees by more than 1%
        ParameterError: If a mode lies outside 0..N/2
    """
    kappas = np.arange(n // 2 + 1) if kappas is None else np.asarray(kappas, dtype=np.intp)
    if np.any(kappas < 0) or np.any(kappas > n // 2):
        raise ParameterError(f"Modes must lie in [0, {n // 2}]")
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")

    baseline = step(np.zeros(n))
    matrix = np.empty((n // 2 + 1, len(kappas)))
    for j, kappa in enumerate(kappas):
        matrix[:, j] = _fd_column(step, int(kappa), n, epsilon, baseline)

    result = JacobianResult(kappas=kappas, kappa_bars=np.arange(n // 2 + 1), matrix=matrix, epsilon=epsilon)
    if check:
        _richardson_check(step, result, n, baseline)
    return result


def _richardson_check(step: StepFn, result: JacobianResult, n: int, baseline: np.ndarray):
    half = result.epsilon / 2.0
    diag = result.diagonal
    floor = 1e-6 * max(1.0, float(np.max(np.abs(diag))))
    for j, kappa in enumerate(result.kappas):
        repeat = _fd_column(step, int(kappa), n, half, baseline)[kappa]
        if abs(repeat - diag[j]) > RICHARDSON_TOLERANCE * abs(diag[j]) + floor:
            raise NonlinearityError(
                f"Jacobian at kappa={kappa} changes from {diag[j]:.6g} to {repeat:.6g} when epsilon "
                f"is halved; reduce epsilon={result.epsilon:g}"
            )


def jacobian_diagonal_autodiff(model: OperatorModel, gamma: GammaInput, kappas: Sequence[int],
                               epsilon: float = 1e-6) -> np.ndarray:
    """Diagonal J(kappa, kappa) by reverse-mode differentiation at e = epsilon."""
    n = model.config.n
    baseline = model.predict(np.zeros((1, n)), gamma)
    scale = np.full(n // 2 + 1, 1.0 / n)
    scale[0] = scale[-1] = 1.0 / (2 * n)

    diagonal = np.empty(len(kappas))
    for j, kappa in enumerate(kappas):
        e = Tensor(epsilon, requires_grad=True)
        forced = F.mul(e, Tensor(_cosine_forcing(int(kappa), n)[None]))
        response = F.sub(model(forced, gamma), Tensor(baseline))
        magnitude = F.complex_abs(F.rfft(response))
        picked = F.sum(F.take(magnitude, [int(kappa)], axis=1))
        (d,) = grad(picked, [e])
        diagonal[j] = float(d) * scale[int(kappa)]
    return diagonal


def compare_autodiff(model: OperatorModel, gamma: GammaInput, result: JacobianResult) -> float:
    """Largest relative gap between the autodiff and finite-difference diagonals.

    Raises:
        NonlinearityError: If the gap exceeds 1e-3
    """
    auto = jacobian_diagonal_autodiff(model, gamma, result.kappas, result.epsilon)
    fd = result.diagonal
    scale = np.maximum(np.abs(fd), 1e-12)
    gap = float(np.max(np.abs(auto - fd) / scale))
    if gap > AUTODIFF_TOLERANCE:
        raise NonlinearityError(f"Autodiff and finite-difference Jacobians differ by {gap:.3e}")
    return gap


def solver_step(params: SolverParams, dt: float = 0.15,
                config: Optional[IntegratorConfig] = None) -> StepFn:
    """One output interval of the reference integrator as a plain map.

    The default tolerances are tight enough for perturbations of order 1e-6.
    """
    config = config or IntegratorConfig(abs_tol=1e-15, rel_tol=1e-10, dt_out=dt)

    def step(values: np.ndarray) -> np.ndarray:
        return DormandPrince(params, config).advance(values, 0.0, dt)

    return step


def model_step(model: OperatorModel, gamma: GammaInput) -> StepFn:
    def step(values: np.ndarray) -> np.ndarray:
        return model.predict(values, gamma)

    return step


def measured_dispersion(step: StepFn, n: int, dt: float, kappas: Optional[Sequence[int]] = None,
                        epsilon: float = 1e-6, check: bool = True) -> Tuple[np.ndarray, np.ndarray, JacobianResult]:
    """Growth rates log(J(kappa, kappa)) / dt of a one-step map.

    Returns:
        (kappas, omega', the Jacobian they came from)
    """
    result = operator_jacobian(step, n, kappas, epsilon, check)
    with np.errstate(divide='ignore'):
        omega = np.log(result.diagonal) / dt
    return result.kappas, omega, result


@dataclass
class DiagnosticsReport:
    """All tables for one (rho, beta) configuration."""
    rho: float
    beta: float
    dt: float
    error: Optional[ErrorCurve] = None
    length_reference: Optional[np.ndarray] = None
    length_predicted: Optional[np.ndarray] = None
    autocorr_r: Optional[np.ndarray] = None
    autocorr_reference: Optional[np.ndarray] = None
    autocorr_predicted: Optional[np.ndarray] = None
    dispersion_kappas: Optional[np.ndarray] = None
    dispersion_analytic: Optional[np.ndarray] = None
    dispersion_measured: Optional[np.ndarray] = None
    jacobian: Optional[JacobianResult] = None
    slopes: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _write_rows(path: Path, header: List[str], rows) -> Path:
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, (str, int, np.integer, bool, np.bool_)) else _fmt(v)
                                 for v in row])
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}")
    logger.info(f"CSV written to {path}")
    return path


def write_report(report: DiagnosticsReport, out_dir: Path) -> List[Path]:
    """Write one CSV per available diagnostic as {diag}_{rho}_{beta}.csv."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Cannot create {out_dir}: {e}")

    tag = f"{report.rho:g}_{report.beta:g}"
    written: List[Path] = []

    if report.error is not None:
        values = report.error.values
        rows = [(i, i * report.dt, v, bool(v > report.error.ceiling)) for i, v in enumerate(values)]
        written.append(_write_rows(out_dir / f"error_{tag}.csv",
                                   ['step', 'time', 'rel_l2', 'above_ceiling'], rows))

    if report.length_reference is not None:
        ref, pred = report.length_reference, report.length_predicted
        rows = [(i, i * report.dt, ref[i], pred[i] if pred is not None and i < len(pred) else 'nan')
                for i in range(len(ref))]
        written.append(_write_rows(out_dir / f"length_{tag}.csv",
                                   ['step', 'time', 'reference', 'predicted'], rows))

    if report.autocorr_r is not None:
        pred = report.autocorr_predicted
        rows = [(r, report.autocorr_reference[k], pred[k] if pred is not None else 'nan')
                for k, r in enumerate(report.autocorr_r)]
        written.append(_write_rows(out_dir / f"autocorr_{tag}.csv", ['r', 'reference', 'predicted'], rows))

    if report.dispersion_kappas is not None:
        rows = zip(report.dispersion_kappas, report.dispersion_analytic, report.dispersion_measured)
        written.append(_write_rows(out_dir / f"dispersion_{tag}.csv", ['kappa', 'analytic', 'measured'], rows))

    if report.jacobian is not None:
        jac = report.jacobian
        header = ['kappa_bar'] + [f"k{int(k)}" for k in jac.kappas]
        rows = ([int(kb)] + list(jac.matrix[i]) for i, kb in enumerate(jac.kappa_bars))
        written.append(_write_rows(out_dir / f"jacobian_{tag}.csv", header, rows))

    if report.slopes:
        steps = sorted(report.slopes)
        n = len(report.slopes[steps[0]][0])
        header = ['x'] + [f"{kind}_step{s}" for s in steps for kind in ('reference', 'predicted')]
        x = mesh(n)
        rows = ([x[j]] + [report.slopes[s][k][j] for s in steps for k in (0, 1)] for j in range(n))
        written.append(_write_rows(out_dir / f"slope_{tag}.csv", header, rows))

    return written


def analytic_dispersion(params: SolverParams, kappas: Sequence[int]) -> np.ndarray:
    return dispersion_omega(params, np.asarray(kappas, dtype=np.float64))
