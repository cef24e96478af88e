"""Adam with decoupled weight decay, gradient clipping and a step schedule."""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor
from ..utils.errors import NonFiniteGradientError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> 'AdamState':
        return cls(step=0,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> Tuple[List[np.ndarray], AdamState]:
    """One Adam update with decoupled, multiplicative weight decay.

    Args:
        params: Current parameter arrays
        grads: Gradients, one per parameter
        state: Moment estimates from the previous step
        lr: Learning rate
        weight_decay: Decay coefficient; params shrink by (1 - lr * weight_decay)
        beta1, beta2: Moment decay rates
        eps: Denominator floor

    Returns:
        (new params, new state); the inputs are not modified

    Raises:
        NonFiniteGradientError: If any gradient contains NaN or inf
        ShapeError: If the state does not match the parameters
    """
    if len(params) != len(grads) or (state.m and len(state.m) != len(params)):
        raise ShapeError(f"Adam got {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"Non-finite gradient for parameter {i}")

    if not state.m:
        state = AdamState.zeros_like(params)

    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"Adam: parameter {p.shape}, gradient {g.shape}, moment {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        decayed = p * (1.0 - lr * weight_decay)
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        new_params.append(decayed - lr * update)
        new_m.append(m)
        new_v.append(v)

    return new_params, AdamState(step=step, m=new_m, v=new_v)


class Adam:
    """Optimizer bound to a list of parameter Tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.0025, weight_decay: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, grads: Sequence[np.ndarray]):
        new_params, self.state = adam_step(
            [p.data for p in self.params], grads, self.state,
            lr=self.lr, weight_decay=self.weight_decay,
            beta1=self.betas[0], beta2=self.betas[1], eps=self.eps,
        )
        for tensor, value in zip(self.params, new_params):
            tensor.data = value


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray],
                   max_norm: float = 50.0) -> Tuple[List[np.ndarray], float]:
    """Rescale gradients so their global L2 norm does not exceed max_norm.

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        logger.debug(f"Clipping gradient norm {norm:.3e} to {max_norm}")
        return [g * factor for g in grads], norm
    return list(grads), norm


def step_lr(lr0: float, epoch: int, step: int = 100, gamma: float = 0.5) -> float:
    """Learning rate lr0 * gamma ** (epoch // step)."""
    return lr0 * gamma ** (epoch // step)
