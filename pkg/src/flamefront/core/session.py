"""Diagnosis orchestration: reference runs, rollouts and report tables."""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .closure import SolverParams, closure_from_rho_beta
from .dataset import DEFAULT_INIT_RANGE, simulate_block
from .diagnostics import (
    SLOPE_STEPS,
    DiagnosticsReport,
    accumulated_error,
    analytic_dispersion,
    autocorrelation,
    compare_autodiff,
    front_length,
    front_slope,
    measured_dispersion,
    model_step,
    solver_step,
    write_report,
)
from .integrator import IntegratorConfig
from .spectral import DEFAULT_MESH
from .training import rollout
from ..nn.checkpoint import Checkpoint, load_checkpoint
from ..nn.models import GammaInput, OperatorModel
from ..utils.errors import ConfigError
from ..utils.progress import ProgressTracker, print_status

logger = logging.getLogger(__name__)

JACOBIAN_METHODS = ('fd', 'autodiff')


@dataclass(frozen=True)
class DiagnosticsOptions:
    """Lengths, windows and Jacobian settings for a diagnosis run."""
    steps: int = 2000
    n_sequences: int = 7
    window: Tuple[int, int] = (1000, 4000)
    epsilon: float = 1e-6
    remove_mean: bool = True
    jacobian_method: str = 'fd'
    kappa_band: float = 1.5
    dt: float = 0.15
    seed: int = 0
    threads: int = 1
    init_range: Tuple[float, float] = DEFAULT_INIT_RANGE

    def __post_init__(self):
        object.__setattr__(self, 'window', tuple(int(w) for w in self.window))
        object.__setattr__(self, 'init_range', tuple(float(v) for v in self.init_range))
        if self.steps < 1 or self.n_sequences < 1:
            raise ConfigError(f"steps and n_sequences must be at least 1, got {self.steps}, {self.n_sequences}")
        if len(self.window) != 2 or not 0 <= self.window[0] < self.window[1]:
            raise ConfigError(f"window must be an increasing pair (lo, hi], got {self.window}")
        if self.jacobian_method not in JACOBIAN_METHODS:
            raise ConfigError(f"jacobian_method must be one of {JACOBIAN_METHODS}, got {self.jacobian_method!r}")
        if not self.epsilon > 0 or not self.dt > 0 or not self.kappa_band > 0:
            raise ConfigError("epsilon, dt and kappa_band must be positive")

    @property
    def sequence_length(self) -> int:
        """Output intervals every reference and predicted sequence runs for."""
        return max(self.steps, self.window[1])

    def to_dict(self) -> dict:
        data = asdict(self)
        data['window'] = list(self.window)
        data['init_range'] = list(self.init_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'DiagnosticsOptions':
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown DiagnosticsOptions keys: {sorted(unknown)}")
        return cls(**data)


def dispersion_kappas(beta: float, n: int, band: float = 1.5) -> np.ndarray:
    """Integer modes 1..floor(band * beta), capped at the Nyquist mode."""
    return np.arange(1, min(int(np.floor(band * beta)), n // 2) + 1)


class DiagnosisSession:
    """Manages a complete diagnosis run over one or more configurations."""

    def __init__(self, checkpoint: Optional[Path], configs: Sequence[Tuple[float, float]],
                 output_dir: Path, options: Optional[DiagnosticsOptions] = None,
                 integrator: Optional[IntegratorConfig] = None):
        """Initialize diagnosis session.

        Args:
            checkpoint: Trained model checkpoint (None diagnoses the reference solver alone)
            configs: (rho, beta) pairs to diagnose
            output_dir: Directory for the CSV tables
            options: Sequence lengths, windows and Jacobian settings
            integrator: Tolerances for the reference runs
        """
        if not configs:
            raise ConfigError("At least one --config RHO,BETA is required")
        self.checkpoint_path = Path(checkpoint) if checkpoint is not None else None
        self.configs = list(configs)
        self.output_dir = Path(output_dir)
        self.options = options or DiagnosticsOptions()
        self.integrator = integrator or IntegratorConfig(dt_out=self.options.dt)
        self.model: Optional[OperatorModel] = None
        self.reports: List[DiagnosticsReport] = []

    @property
    def n(self) -> int:
        return self.model.config.n if self.model is not None else DEFAULT_MESH

    def run(self) -> List[Path]:
        """Run the complete diagnosis workflow.

        Returns:
            Paths of every CSV written

        Raises:
            FlameFrontError: If any step fails
        """
        written: List[Path] = []
        try:
            print_status("Step 1: Loading checkpoint", "INFO")
            self.load_model()

            for index, (rho, beta) in enumerate(self.configs):
                params = closure_from_rho_beta(rho, beta)
                print_status(f"Step 2: Reference runs at rho={rho:g}, beta={beta:g}", "INFO")
                reference = self._reference(params, index)

                report = DiagnosticsReport(rho=params.rho, beta=params.beta, dt=self.options.dt)
                if self.model is not None:
                    print_status("Step 3: Model rollouts", "INFO")
                    predicted = self._rollouts(params, reference)
                    print_status("Step 4: Error, length and slope", "INFO")
                    self._trajectory_metrics(report, reference, predicted)
                else:
                    predicted = []
                    report.length_reference = front_length(reference[0][:self.options.steps + 1])

                print_status("Step 5: Autocorrelation", "INFO")
                self._statistics(report, reference, predicted)

                print_status("Step 6: Jacobian and dispersion", "INFO")
                self._dispersion(report, params)

                print_status("Step 7: Writing tables", "INFO")
                written += write_report(report, self.output_dir)
                self.reports.append(report)

            print_status(f"Diagnosis complete! Output: {self.output_dir}", "SUCCESS")
            return written

        except KeyboardInterrupt:
            print_status("Diagnosis interrupted by user", "WARNING")
            raise

        except Exception as e:
            print_status(f"Diagnosis failed: {e}", "ERROR")
            raise

    def run_dispersion(self) -> List[Path]:
        """Analytic and measured dispersion plus Jacobian tables only.

        Returns:
            Paths of every CSV written
        """
        self.load_model()
        written: List[Path] = []
        with ProgressTracker(total=len(self.configs), desc="Dispersion", unit="config") as progress:
            for rho, beta in self.configs:
                params = closure_from_rho_beta(rho, beta)
                report = DiagnosticsReport(rho=params.rho, beta=params.beta, dt=self.options.dt)
                self._dispersion(report, params)
                written += write_report(report, self.output_dir)
                self.reports.append(report)
                progress.update(1)
        return written

    def load_model(self):
        """Load the checkpoint's model once, if a checkpoint was given."""
        if self.model is not None:
            return
        if self.checkpoint_path is None:
            print_status("No checkpoint given; diagnosing the reference solver only", "WARNING")
            return
        checkpoint: Checkpoint = load_checkpoint(self.checkpoint_path)
        self.model = checkpoint.to_model()
        logger.info(f"Loaded {checkpoint.kind} model from epoch {checkpoint.epoch}")

    def _reference(self, params: SolverParams, config_index: int) -> np.ndarray:
        opts = self.options
        with ProgressTracker(total=opts.n_sequences, desc="Reference", unit="seq") as progress:
            block, seeds = simulate_block(
                params, config_index, opts.n_sequences, opts.sequence_length, dt=opts.dt,
                seed=opts.seed, split='test', n=self.n, init_range=opts.init_range,
                integrator=self.integrator, threads=opts.threads, progress=progress,
            )
        logger.debug(f"Reference seeds: {seeds}")
        return block.astype(np.float64)

    def _rollouts(self, params: SolverParams, reference: np.ndarray) -> List[np.ndarray]:
        gamma = GammaInput(params.rho, params.beta)
        predicted = []
        for i, ref in enumerate(reference):
            sequence = rollout(self.model, ref[0], gamma, self.options.sequence_length, self.options.dt)
            if sequence.failed_at is not None:
                print_status(f"Rollout {i} turned non-finite at step {sequence.failed_at}", "WARNING")
            predicted.append(np.asarray(sequence.states))
        return predicted

    def _trajectory_metrics(self, report: DiagnosticsReport, reference: np.ndarray,
                            predicted: List[np.ndarray]):
        steps = self.options.steps
        ref = reference[0][:steps + 1]
        pred = predicted[0][:steps + 1]
        if len(pred) < len(ref):
            logger.warning(f"Prediction stops after {len(pred) - 1} steps; error curve truncated")
        report.error = accumulated_error(pred, ref[:len(pred)])
        report.length_reference = front_length(ref)
        report.length_predicted = front_length(pred)
        horizon = report.error.horizon
        logger.info(f"Error stays below {report.error.ceiling} for "
                    f"{horizon if horizon is not None else len(pred) - 1} steps")

        for step in SLOPE_STEPS:
            if step < len(pred):
                report.slopes[step] = (front_slope(ref[step]), front_slope(pred[step]))

    def _statistics(self, report: DiagnosticsReport, reference: np.ndarray,
                    predicted: List[np.ndarray]):
        opts = self.options
        report.autocorr_r, report.autocorr_reference = autocorrelation(
            list(reference), opts.window, opts.remove_mean)
        usable = [p for p in predicted if len(p) > opts.window[1]]
        if predicted and not usable:
            print_status("No rollout reaches the statistics window; skipping model autocorrelation", "WARNING")
        if usable:
            _, report.autocorr_predicted = autocorrelation(usable, opts.window, opts.remove_mean)

    def _dispersion(self, report: DiagnosticsReport, params: SolverParams):
        opts = self.options
        kappas = dispersion_kappas(params.beta, self.n, opts.kappa_band)
        if self.model is not None:
            gamma = GammaInput(params.rho, params.beta)
            step = model_step(self.model, gamma)
        else:
            step = solver_step(params, opts.dt)

        kappas, omega, jacobian = measured_dispersion(step, self.n, opts.dt, kappas, opts.epsilon)
        if self.model is not None and opts.jacobian_method == 'autodiff':
            gap = compare_autodiff(self.model, gamma, jacobian)
            logger.info(f"Autodiff Jacobian diagonal agrees to {gap:.2e}")

        report.dispersion_kappas = kappas
        report.dispersion_analytic = analytic_dispersion(params, kappas)
        report.dispersion_measured = omega
        report.jacobian = jacobian


def dispersion_tables(configs: Sequence[Tuple[float, float]], output_dir: Path,
                      checkpoint: Optional[Path] = None,
                      options: Optional[DiagnosticsOptions] = None) -> List[Path]:
    """Analytic and measured dispersion (plus Jacobian) for every configuration.

    The measured curve comes from the checkpoint's model when one is given
    and from the reference integrator otherwise.
    """
    return DiagnosisSession(checkpoint, configs, output_dir, options).run_dispersion()


def diagnose(checkpoint: Optional[Path], configs: Sequence[Tuple[float, float]], output_dir: Path,
             options: Optional[DiagnosticsOptions] = None,
             integrator: Optional[IntegratorConfig] = None) -> List[Path]:
    """Run every diagnostic for the given configurations.

    Args:
        checkpoint: Trained model checkpoint
        configs: (rho, beta) pairs
        output_dir: Directory for the CSV tables
        options: Diagnosis settings
        integrator: Reference integrator tolerances

    Returns:
        Paths of the written tables
    """
    session = DiagnosisSession(checkpoint, configs, output_dir, options, integrator)
    return session.run()
