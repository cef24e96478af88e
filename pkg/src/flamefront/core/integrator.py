"""Adaptive Dormand-Prince 5(4) time integration of the front equation."""

import logging
from dataclasses import dataclass, asdict
from typing import Callable, Iterator, List, Optional

import numpy as np

from .closure import SolverParams
from .spectral import FrontState, rhs_values, BLOWUP_THRESHOLD
from ..utils.errors import BlowUpError, NumericalError, StepLimitError
from ..utils.validation import require_positive

logger = logging.getLogger(__name__)

# Dormand-Prince tableau; the equation is autonomous so the nodes c_i are not needed
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between the 5th and embedded 4th order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


@dataclass(frozen=True)
class IntegratorConfig:
    """Error control and output cadence for the adaptive integrator."""
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    dt_out: float = 0.15
    max_internal_steps: int = 1_000_000

    def __post_init__(self):
        require_positive('abs_tol', self.abs_tol)
        require_positive('rel_tol', self.rel_tol)
        require_positive('dt_out', self.dt_out)
        require_positive('max_internal_steps', self.max_internal_steps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolutionSequence:
    """Time-ordered front states at a fixed output interval."""
    params: SolverParams
    dt_out: float
    states: np.ndarray
    t0: float = 0.0
    seed: Optional[int] = None
    failed_at: Optional[int] = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt_out * np.arange(len(self.states))

    def __len__(self) -> int:
        return len(self.states)

    def state(self, index: int) -> FrontState:
        return FrontState(self.states[index], t=float(self.times[index]))


class DormandPrince:
    """Stateful Dormand-Prince stepper that remembers its last step size.

    The stepper integrates phi_t = rhs(phi) for one parameter set; reusing
    one instance across consecutive outputs avoids re-estimating the step
    size every dt_out.
    """

    def __init__(self, params: SolverParams, config: IntegratorConfig,
                 rhs_fn: Callable[[np.ndarray, SolverParams], np.ndarray] = rhs_values):
        self.params = params
        self.config = config
        self.rhs_fn = rhs_fn
        self.h: Optional[float] = None
        self.steps_taken = 0
        self.steps_rejected = 0

    def _f(self, y: np.ndarray) -> np.ndarray:
        return self.rhs_fn(y, self.params)

    def _error_norm(self, err: np.ndarray, y: np.ndarray, y_new: np.ndarray) -> float:
        scale = self.config.abs_tol + self.config.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
        return float(np.sqrt(np.mean((err / scale) ** 2)))

    def _initial_step(self, y: np.ndarray, f0: np.ndarray, span: float) -> float:
        # Hairer-Norsett-Wanner starting step heuristic
        scale = self.config.abs_tol + self.config.rel_tol * np.abs(y)
        d0 = np.sqrt(np.mean((y / scale) ** 2))
        d1 = np.sqrt(np.mean((f0 / scale) ** 2))
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        h0 = min(h0, span)
        f1 = self._f(y + h0 * f0)
        d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
        return min(100.0 * h0, h1, span)

    def advance(self, y: np.ndarray, t: float, t_target: float) -> np.ndarray:
        """Integrate from t to t_target, landing exactly on t_target.

        Raises:
            StepLimitError: If the internal step budget is exhausted
            BlowUpError: If the state becomes non-finite or exceeds 1e6
        """
        span = t_target - t
        if span <= 0.0:
            raise NumericalError(f"t_target {t_target} must exceed current time {t}")

        y = np.array(y, dtype=np.float64)
        k1 = self._f(y)
        h_next = self.h if self.h is not None else self._initial_step(y, k1, span)
        steps = 0

        while t < t_target:
            if steps >= self.config.max_internal_steps:
                raise StepLimitError(
                    f"Exceeded {self.config.max_internal_steps} internal steps before t={t_target}"
                )
            steps += 1

            remaining = t_target - t
            clamped = h_next >= remaining
            h = remaining if clamped else h_next

            stages = [k1]
            for i in range(1, 7):
                yi = y + h * sum(a * k for a, k in zip(A[i], stages) if a != 0.0)
                stages.append(self._f(yi))
            y_new = y + h * sum(b * k for b, k in zip(B, stages) if b != 0.0)
            err = h * sum(e * k for e, k in zip(E, stages) if e != 0.0)

            norm = self._error_norm(err, y, y_new)
            if norm <= 1.0:
                t = t_target if clamped else t + h
                y = y_new
                k1 = stages[6]  # FSAL
                self.steps_taken += 1
                factor = MAX_FACTOR if norm == 0.0 else min(MAX_FACTOR, SAFETY * norm ** -0.2)
                # a clamped step says nothing against the larger suggestion
                h_next = max(h_next, h * factor) if clamped else h * factor

                peak = float(np.max(np.abs(y)))
                if not np.isfinite(peak) or peak > BLOWUP_THRESHOLD:
                    raise BlowUpError(f"Solution blew up at t={t:.6g} (max |phi|={peak:.3e})",
                                      time=t, max_abs=peak)
            else:
                self.steps_rejected += 1
                h_next = h * max(MIN_FACTOR, SAFETY * norm ** -0.2)
                if not np.isfinite(h_next) or h_next < 1e-14 * max(1.0, abs(t)):
                    raise BlowUpError(f"Step size underflow at t={t:.6g}", time=t,
                                      max_abs=float(np.max(np.abs(y))))

        self.h = h_next
        return y


def step_to(state: FrontState, params: SolverParams, config: IntegratorConfig,
            t_target: float) -> FrontState:
    """Advance a front state to t_target with adaptive Dormand-Prince steps.

    Args:
        state: Starting state (its t is the current time)
        params: Closed solver parameters
        config: Tolerances and step budget
        t_target: Target time, strictly greater than state.t

    Returns:
        FrontState at t_target
    """
    stepper = DormandPrince(params, config)
    values = stepper.advance(state.values, state.t, t_target)
    return FrontState(values, t=t_target)


def iterate(initial: FrontState, params: SolverParams, config: IntegratorConfig,
            n_steps: int, dt_out: Optional[float] = None) -> Iterator[np.ndarray]:
    """Yield the initial values followed by n_steps successive outputs.

    Raises:
        BlowUpError, StepLimitError: With ``step`` set to the failing output index
    """
    dt = config.dt_out if dt_out is None else require_positive('dt_out', dt_out)
    stepper = DormandPrince(params, config)
    y = initial.values.copy()
    t0 = initial.t
    yield y

    for i in range(1, n_steps + 1):
        try:
            y = stepper.advance(y, t0 + (i - 1) * dt, t0 + i * dt)
        except BlowUpError as e:
            raise BlowUpError(f"Step {i}: {e}", step=i, time=e.time, max_abs=e.max_abs) from e
        except StepLimitError as e:
            raise StepLimitError(f"Step {i}: {e}") from e
        yield y


def simulate(initial: FrontState, params: SolverParams, config: IntegratorConfig,
             n_steps: int, dt_out: Optional[float] = None,
             progress: Optional[Callable[[int], None]] = None) -> SolutionSequence:
    """Integrate n_steps output intervals and collect every state.

    Args:
        initial: Initial front state
        params: Closed solver parameters
        config: Integrator settings
        n_steps: Number of output intervals (0 returns only the initial state)
        dt_out: Output interval, defaults to config.dt_out
        progress: Optional callback receiving the number of completed steps

    Returns:
        SolutionSequence with n_steps + 1 states at t0, t0 + dt, ...
    """
    if n_steps < 0:
        raise NumericalError(f"n_steps must be non-negative, got {n_steps}")

    dt = config.dt_out if dt_out is None else dt_out
    states: List[np.ndarray] = []
    for i, values in enumerate(iterate(initial, params, config, n_steps, dt)):
        states.append(values)
        if progress and i:
            progress(1)

    return SolutionSequence(params=params, dt_out=dt, states=np.stack(states), t0=initial.t)
