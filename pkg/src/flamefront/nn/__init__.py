"""Differentiation engine and parametric neural operators."""

from .tensor import Tensor, grad, no_grad
from .models import GammaInput, PfnoConfig, PcnnConfig, PFNO, PCNN, build_model
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint

__all__ = [
    'Tensor', 'grad', 'no_grad',
    'GammaInput', 'PfnoConfig', 'PcnnConfig', 'PFNO', 'PCNN', 'build_model',
    'Checkpoint', 'save_checkpoint', 'load_checkpoint',
]
