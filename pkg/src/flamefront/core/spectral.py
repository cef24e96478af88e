"""Pseudo-spectral operators on the periodic front domain (-pi, pi]."""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy import fft

from .closure import SolverParams
from ..utils.errors import BlowUpError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_MESH = 256
BLOWUP_THRESHOLD = 1e6


@dataclass(frozen=True)
class FrontState:
    """Front displacement phi(x) sampled on a uniform periodic mesh.

    Sample j sits at x_j = -pi + (j + 1) * 2 pi / n, so the last sample is
    x = pi, identified with x = -pi.
    """
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 2 or values.size % 2:
            raise ShapeError(f"FrontState needs an even-length 1-D array, got shape {values.shape}")
        object.__setattr__(self, 'values', values)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return 2.0 * np.pi / self.n

    def with_values(self, values: np.ndarray, t: float = None) -> 'FrontState':
        return replace(self, values=values, t=self.t if t is None else t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def mesh(n: int = DEFAULT_MESH) -> np.ndarray:
    """Grid coordinates x_j in (-pi, pi]."""
    return -np.pi + 2.0 * np.pi * np.arange(1, n + 1) / n


@lru_cache(maxsize=16)
def wavenumbers(n: int) -> np.ndarray:
    """Non-negative integer wavenumbers 0..n/2 of the real FFT."""
    k = np.arange(n // 2 + 1, dtype=np.float64)
    k.setflags(write=False)
    return k


def derivative(values: np.ndarray, order: int = 1) -> np.ndarray:
    """Spectral derivative along the last axis.

    The Nyquist mode is dropped for odd orders, where its derivative is
    not representable on the real grid.
    """
    n = values.shape[-1]
    k = wavenumbers(n)
    coeffs = fft.rfft(values, axis=-1) * (1j * k) ** order
    if order % 2:
        coeffs[..., -1] = 0.0
    return fft.irfft(coeffs, n=n, axis=-1)


def gamma_op(state: FrontState) -> FrontState:
    """Apply the non-local operator Gamma: phi -> F^-1(|kappa| F phi)."""
    k = wavenumbers(state.n)
    out = fft.irfft(fft.rfft(state.values) * k, n=state.n)
    return state.with_values(out)


def dealiased_square(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Spectrum of u**2 from the half spectrum of u, using the 3/2 padding rule.

    Args:
        coeffs: rfft coefficients of u (length n/2 + 1)
        n: Grid size of u

    Returns:
        rfft coefficients of u**2 truncated to n/2 + 1 modes
    """
    m = 3 * n // 2
    padded = np.zeros(m // 2 + 1, dtype=np.complex128)
    padded[: n // 2 + 1] = coeffs
    u_fine = fft.irfft(padded, n=m) * (m / n)
    square = fft.rfft(u_fine * u_fine)[: n // 2 + 1] * (n / m)
    return square


def linear_symbol(params: SolverParams, n: int) -> np.ndarray:
    """Fourier multiplier of the linear terms, equal to omega(kappa)."""
    s = wavenumbers(n) / params.beta
    s2 = s * s
    return params.tau * (-params.mu * s2 * s2 + params.nu * s2 + params.rho * s)


def rhs(state: FrontState, params: SolverParams) -> FrontState:
    """Time derivative phi_t of the rescaled Sivashinsky equation.

    phi_t = tau * [ -(phi_x)^2 / (2 beta^2) - mu/beta^4 phi_xxxx
                    - nu/beta^2 phi_xx + rho/beta Gamma(phi) ]

    Raises:
        BlowUpError: If the tendency is not finite
    """
    tendency = rhs_values(state.values, params)
    return state.with_values(tendency)


def rhs_values(values: np.ndarray, params: SolverParams) -> np.ndarray:
    """Array form of rhs used by the integrator's inner loop."""
    n = values.shape[-1]
    k = wavenumbers(n)
    coeffs = fft.rfft(values)

    slope = 1j * k * coeffs
    slope[-1] = 0.0
    quadratic = dealiased_square(slope, n)

    spectrum = linear_symbol(params, n) * coeffs - (params.tau / (2.0 * params.beta ** 2)) * quadratic
    tendency = fft.irfft(spectrum, n=n)

    if not np.all(np.isfinite(tendency)):
        raise BlowUpError("Non-finite tendency in rhs", max_abs=float(np.max(np.abs(values))))
    return tendency
