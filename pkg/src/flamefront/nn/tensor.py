"""Dense tensors with reverse-mode automatic differentiation.

Each non-leaf Tensor remembers its parents and a backward function that
maps the cotangent of the output to cotangents of the parents. Complex
tensors use the conjugate-cotangent convention: the gradient of a real
loss L with respect to z = a + ib is dL/da + i dL/db.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.errors import GraphError

logger = logging.getLogger(__name__)

_grad_mode = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """Suppress graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _as_array(data) -> np.ndarray:
    array = np.asarray(data)
    if np.iscomplexobj(array):
        return array.astype(np.complex128, copy=False)
    return array.astype(np.float64, copy=False)


class Tensor:
    """A node in the differentiation graph wrapping a numpy array."""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_parents', '_backward', '_op')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ''

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.real) if self.data.size == 1 else float('nan')

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: Optional[np.ndarray] = None):
        """Accumulate gradients of this tensor into the .grad of every leaf."""
        leaves = [node for node in _topological_order(self)
                  if node.is_leaf and node.requires_grad]
        grads = _propagate(self, seed)
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def __add__(self, other):
        from .functional import add
        return add(self, other)

    def __sub__(self, other):
        from .functional import sub
        return sub(self, other)

    def __mul__(self, other):
        from .functional import mul, scale
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .functional import scale
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn,
              op: str) -> Tensor:
    """Create an op output, recording the graph edge when gradients are needed."""
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    # iterative DFS: recurrent rollouts build graphs deeper than the recursion limit
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _propagate(output: Tensor, seed: Optional[np.ndarray],
               keep: Sequence[Tensor] = ()) -> Dict[int, np.ndarray]:
    if not output.requires_grad:
        raise GraphError("Output does not depend on any tensor that requires grad")

    if seed is None:
        if output.data.size != 1:
            raise GraphError(f"Gradient seed required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)

    kept = {id(x) for x in keep}
    grads: Dict[int, np.ndarray] = {id(output): _as_array(seed)}
    for node in reversed(_topological_order(output)):
        # intermediate cotangents are released once consumed
        if node.is_leaf or id(node) in kept:
            g = grads.get(id(node))
        else:
            g = grads.pop(id(node), None)
        if g is None or node.is_leaf:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not parent.is_complex and np.iscomplexobj(pg):
                pg = pg.real
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


def grad(output: Tensor, inputs: Sequence[Tensor],
         seed: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Gradients of output with respect to inputs.

    Unlike Tensor.backward this leaves every .grad untouched, so
    independent graphs sharing parameters can be differentiated from
    several threads.

    Raises:
        GraphError: If output or any input is detached from the graph
    """
    for x in inputs:
        if not x.requires_grad:
            raise GraphError(f"Cannot differentiate with respect to detached tensor {x!r}")

    grads = _propagate(output, seed, keep=inputs)
    return [grads[id(x)] if id(x) in grads else np.zeros_like(x.data) for x in inputs]
