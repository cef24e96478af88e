"""flamefront - parametric flame-front simulation and neural operator surrogates."""

__version__ = "0.1.0"
