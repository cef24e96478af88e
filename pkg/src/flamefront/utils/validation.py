"""Input validation utilities."""

import logging
from typing import Tuple

import numpy as np

from .errors import ParameterError

logger = logging.getLogger(__name__)


def validate_rho_beta(rho: float, beta: float) -> Tuple[float, float]:
    """Validate a (rho, beta) configuration tuple.

    Args:
        rho: Blend ratio between diffusive-thermal (0) and Darrieus-Landau (1)
        beta: Largest unstable wavenumber

    Returns:
        The pair as floats

    Raises:
        ParameterError: If rho is outside [0, 1] or beta is not positive
    """
    rho = float(rho)
    beta = float(beta)

    if not np.isfinite(rho) or rho < 0.0 or rho > 1.0:
        raise ParameterError(f"rho must lie in [0, 1], got {rho}")

    if not np.isfinite(beta) or beta <= 0.0:
        raise ParameterError(f"beta must be positive, got {beta}")

    return rho, beta


def require_positive(name: str, value: float) -> float:
    """Check that a named scalar is strictly positive.

    Raises:
        ParameterError: If value is not a finite positive number
    """
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value


def parse_config_pair(text: str) -> Tuple[float, float]:
    """Parse a "rho,beta" pair as given on the command line.

    Accepts "1,10", "(1,10)" and "1 10".

    Raises:
        ParameterError: If the text does not hold two numbers
    """
    cleaned = text.strip().strip('()[]').replace(',', ' ')
    parts = cleaned.split()
    if len(parts) != 2:
        raise ParameterError(f"Expected RHO,BETA, got {text!r}")
    try:
        rho, beta = float(parts[0]), float(parts[1])
    except ValueError:
        raise ParameterError(f"Expected RHO,BETA, got {text!r}")
    return validate_rho_beta(rho, beta)


def format_size(size_bytes: int) -> str:
    """Format byte size in human-readable format.

    Args:
        size_bytes: Size in bytes

    Returns:
        Formatted string (e.g., "1.5 GB")
    """
    for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
        if size_bytes < 1024.0:
            return f"{size_bytes:.1f} {unit}"
        size_bytes /= 1024.0
    return f"{size_bytes:.1f} PB"
