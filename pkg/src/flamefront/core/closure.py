"""Parameter closure and dispersion relation of the rescaled Sivashinsky equation.

Given the blend ratio rho and the cutoff wavenumber beta, the remaining
coefficients (mu, nu, tau) follow from three constraints:

* omega(beta) = 0, which gives nu = mu - rho;
* the peak of omega/tau over 0 < kappa < beta equals 1/4;
* tau = rho * beta / 10 + (1 - rho).
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, Union

import numpy as np
from scipy import optimize

from ..utils.errors import ClosureError, ParameterError
from ..utils.validation import validate_rho_beta

logger = logging.getLogger(__name__)

PEAK_GROWTH = 0.25
MU_TOLERANCE = 1e-10
SCAN_POINTS = 4096


@dataclass(frozen=True)
class SolverParams:
    """Closed coefficient set (rho, beta, mu, nu, tau)."""
    rho: float
    beta: float
    mu: float
    nu: float
    tau: float

    @property
    def gamma(self) -> tuple:
        return (self.rho, self.beta)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'SolverParams':
        return cls(**{k: float(data[k]) for k in ('rho', 'beta', 'mu', 'nu', 'tau')})


@dataclass(frozen=True)
class PhysicalParams:
    """Unscaled flame parameters and the three transformation constants."""
    a: float
    b: float
    c: float
    Omega: float
    LeStar: float


@dataclass(frozen=True)
class ScaledCoefficients:
    """Coefficients produced by the variable transformation, unconstrained."""
    beta: float
    nu: float
    rho: float
    mu: float
    tau: float


def growth_shape(s: np.ndarray, mu: float, rho: float) -> np.ndarray:
    """Evaluate f(s) = -mu s^4 + (mu - rho) s^2 + rho s, i.e. omega/tau at s = kappa/beta."""
    s2 = s * s
    return -mu * s2 * s2 + (mu - rho) * s2 + rho * s


def peak_growth(mu: float, rho: float) -> float:
    """Maximum of f(s) over 0 < s < 1.

    A uniform grid scan locates the best cell; golden-section search then
    refines the maximum inside the bracketing neighbours.
    """
    s = np.linspace(0.0, 1.0, SCAN_POINTS)
    values = growth_shape(s, mu, rho)
    i = int(np.argmax(values))
    best = float(values[i])

    if i == 0 or i == SCAN_POINTS - 1:
        return best

    def negative(x):
        return -float(growth_shape(np.asarray(x), mu, rho))

    try:
        result = optimize.minimize_scalar(
            negative,
            bracket=(s[i - 1], s[i], s[i + 1]),
            method='golden',
            tol=1e-12,
        )
    except ValueError:
        # flat top: neighbours tie with the centre
        return best

    return max(best, -float(result.fun))


def closure_from_rho_beta(rho: float, beta: float) -> SolverParams:
    """Close the coefficient set for a (rho, beta) configuration.

    Args:
        rho: Blend ratio in [0, 1]
        beta: Largest unstable wavenumber, > 0

    Returns:
        SolverParams satisfying nu = mu - rho, peak omega/tau = 1/4 and the
        tau rule

    Raises:
        ParameterError: If rho or beta are out of range
        ClosureError: If no mu in [0, 1] closes the peak constraint
    """
    rho, beta = validate_rho_beta(rho, beta)

    def residual(mu: float) -> float:
        return peak_growth(mu, rho) - PEAK_GROWTH

    lo, hi = 0.0, 1.0
    g_lo, g_hi = residual(lo), residual(hi)

    if abs(g_lo) <= 1e-12:
        mu = lo
    elif abs(g_hi) <= 1e-12:
        mu = hi
    elif g_lo > 0.0 or g_hi < 0.0:
        raise ClosureError(
            f"Closure does not bracket a root for rho={rho}, beta={beta}: "
            f"g(0)={g_lo:.3e}, g(1)={g_hi:.3e}"
        )
    else:
        # residual increases pointwise in mu, so bisection is safe
        mu = optimize.bisect(residual, lo, hi, xtol=MU_TOLERANCE, maxiter=200)

    tau = rho * beta / 10.0 + (1.0 - rho)
    params = SolverParams(rho=rho, beta=beta, mu=float(mu), nu=float(mu) - rho, tau=tau)
    logger.debug(f"Closure for rho={rho}, beta={beta}: {params}")
    return params


def dispersion_omega(params: SolverParams, kappa: Union[float, np.ndarray]):
    """Linear growth rate omega(kappa) of a perturbation about the flat front.

    Args:
        params: Closed solver parameters
        kappa: Wavenumber(s), non-negative

    Returns:
        tau * (-mu s^4 + nu s^2 + rho s) with s = kappa / beta; a float for
        scalar input, an array otherwise
    """
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(k < 0):
        raise ParameterError("kappa must be non-negative")

    s = k / params.beta
    s2 = s * s
    omega = params.tau * (-params.mu * s2 * s2 + params.nu * s2 + params.rho * s)
    return float(omega) if omega.ndim == 0 else omega


def physical_to_scaled(p: PhysicalParams) -> ScaledCoefficients:
    """Apply the variable transformation to the unscaled equation's coefficients.

    No closure constraint is imposed on the result.

    Raises:
        ParameterError: If a, b or c is not positive, or Omega is outside [0, 1]
    """
    for name in ('a', 'b', 'c'):
        value = getattr(p, name)
        if not np.isfinite(value) or value <= 0.0:
            raise ParameterError(f"{name} must be positive, got {value}")

    if not 0.0 <= p.Omega <= 1.0:
        raise ParameterError(f"Omega must lie in [0, 1], got {p.Omega}")

    a, b, c = float(p.a), float(p.b), float(p.c)
    return ScaledCoefficients(
        beta=b / c,
        nu=p.LeStar / c ** 2,
        rho=(1.0 - p.Omega) * b * c,
        mu=4.0 * (1.0 + p.LeStar) ** 2 / (b ** 2 * c ** 4),
        tau=1.0 / (a ** 2 * b ** 2),
    )


def standard_grid() -> list:
    """The fifteen (rho, beta) training configurations."""
    return [(rho, beta)
            for beta in (10.0, 25.0, 40.0)
            for rho in (0.0, 0.25, 0.5, 0.75, 1.0)]
