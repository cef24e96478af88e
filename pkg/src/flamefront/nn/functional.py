"""Differentiable operations on Tensors.

Shapes follow the (batch, channels, mesh) layout used by the models.
Every op returns a new Tensor and, when any input requires grad, records
a closure computing the exact adjoint.
"""

from typing import Optional, Sequence, Union

import numpy as np
from scipy import fft

from .tensor import Tensor, make_node
from ..utils.errors import ShapeError

Operand = Union[Tensor, float, np.ndarray]


def _wrap(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a cotangent back down to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast('add', a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, 'add')


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast('sub', a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, 'sub')


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast('mul', a, b)

    def backward(g):
        return (_unbroadcast(g * np.conj(b.data), a.shape),
                _unbroadcast(g * np.conj(a.data), b.shape))

    return make_node(a.data * b.data, (a, b), backward, 'mul')


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)

    def backward(g):
        return (alpha * g,)

    return make_node(alpha * x.data, (x,), backward, 'scale')


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Channel-mixing matrix product applied pointwise.

    Args:
        x: Input of shape (B, C_in) or (B, C_in, N)
        weight: Matrix of shape (C_out, C_in)
        bias: Optional vector of shape (C_out,)

    Returns:
        Tensor of shape (B, C_out) or (B, C_out, N)
    """
    if x.ndim not in (2, 3) or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")

    w = weight.data
    if x.ndim == 2:
        out = x.data @ w.T
        if bias is not None:
            out = out + bias.data
    else:
        out = np.matmul(w, x.data)
        if bias is not None:
            out = out + bias.data[:, None]

    def backward(g):
        if x.ndim == 2:
            gx = g @ w
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        else:
            gx = np.matmul(w.T, g)
            gw = np.matmul(g, x.data.transpose(0, 2, 1)).sum(axis=0)
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, backward, 'linear')


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        return (g * mask,)

    return make_node(np.where(mask, x.data, 0.0), (x,), backward, 'relu')


def conv1d_periodic(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution with wrap-around padding.

    out[b, o, n] = sum_{i, j} weight[o, i, j] * x[b, i, (n + j - K//2) mod N]

    Args:
        x: Input of shape (B, C_in, N)
        weight: Filters of shape (C_out, C_in, K) with odd K
        bias: Optional vector of shape (C_out,)
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d_periodic: cannot apply filters {weight.shape} to input {x.shape}")
    width = weight.shape[2]
    if width % 2 == 0:
        raise ShapeError(f"conv1d_periodic: filter width must be odd, got {width}")

    shifts = [j - width // 2 for j in range(width)]
    stacked = np.stack([np.roll(x.data, -s, axis=-1) for s in shifts])
    out = np.einsum('oij,jbin->bon', weight.data, stacked, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gw = np.einsum('bon,jbin->oij', g, stacked, optimize=True)
        g_stacked = np.einsum('oij,bon->jbin', weight.data, g, optimize=True)
        gx = np.zeros_like(x.data)
        for j, s in enumerate(shifts):
            gx += np.roll(g_stacked[j], s, axis=-1)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2))
        return gx, gw

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, backward, 'conv1d_periodic')


def maxpool1d(x: Tensor, width: int = 2) -> Tensor:
    """Non-overlapping max pool along the last axis; ties go to the lower index."""
    n = x.shape[-1]
    if n % width:
        raise ShapeError(f"maxpool1d: length {n} is not divisible by {width}")

    windows = x.data.reshape(x.shape[:-1] + (n // width, width))
    # np.argmax returns the first maximum
    index = np.argmax(windows, axis=-1)[..., None]
    out = np.take_along_axis(windows, index, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, index, g[..., None], axis=-1)
        return (gw.reshape(x.shape),)

    return make_node(out, (x,), backward, 'maxpool1d')


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = np.repeat(x.data, factor, axis=-1)

    def backward(g):
        return (g.reshape(x.shape + (factor,)).sum(axis=-1),)

    return make_node(out, (x,), backward, 'upsample_nearest')


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along the channel axis."""
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, backward, 'concat')


def sum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.sum(x.data), (x,), backward, 'sum')


def mean(x: Tensor) -> Tensor:
    size = x.data.size

    def backward(g):
        return (np.broadcast_to(g / size, x.shape).copy(),)

    return make_node(np.mean(x.data), (x,), backward, 'mean')


def rfft(x: Tensor, modes: Optional[int] = None) -> Tensor:
    """Real FFT along the last axis, optionally keeping only the first modes.

    Args:
        x: Real tensor with even last extent N
        modes: Number of leading coefficients to keep (default N/2 + 1)
    """
    n = x.shape[-1]
    if x.is_complex or n % 2:
        raise ShapeError(f"rfft needs a real input of even length, got {x.dtype} of length {n}")
    half = n // 2 + 1
    modes = half if modes is None else modes
    if not 1 <= modes <= half:
        raise ShapeError(f"rfft: modes must lie in [1, {half}], got {modes}")

    out = fft.rfft(x.data, axis=-1)[..., :modes]

    def backward(g):
        h = np.zeros(x.shape[:-1] + (half,), dtype=np.complex128)
        h[..., :modes] = g
        # interior modes appear twice in the real signal
        h[..., 1:n // 2] *= 0.5
        return (n * fft.irfft(h, n=n, axis=-1),)

    return make_node(out, (x,), backward, 'rfft')


def irfft(c: Tensor, n: int) -> Tensor:
    """Inverse real FFT to length n; missing high modes are taken as zero.

    The imaginary parts of the DC and Nyquist coefficients are ignored, as
    in every real inverse transform.
    """
    half = n // 2 + 1
    modes = c.shape[-1]
    if n % 2 or modes > half:
        raise ShapeError(f"irfft: {modes} modes do not fit an even length {n}")

    out = fft.irfft(c.data, n=n, axis=-1)

    def backward(g):
        full = fft.rfft(g, axis=-1) / n
        full[..., 1:n // 2] *= 2.0
        full[..., 0] = full[..., 0].real
        full[..., n // 2] = full[..., n // 2].real
        return (full[..., :modes],)

    return make_node(out, (c,), backward, 'irfft')


def complex_mode_mix(z: Tensor, r_re: Tensor, r_im: Tensor,
                     s_re: Optional[Tensor] = None, s_im: Optional[Tensor] = None,
                     ratios: Optional[Tensor] = None) -> Tensor:
    """Per-mode complex channel mixing.

    out[b, o, k] = sum_i (R[k, o, i] + S[k, o, i] * ratios[b, k]) * z[b, i, k]

    with R = r_re + i r_im and S = s_re + i s_im. The S term is optional and
    needs the per-sample real ratios of shape (B, K).

    Args:
        z: Complex modes of shape (B, C_in, K)
        r_re, r_im: Real and imaginary parts of R, shape (K, C_out, C_in)
        s_re, s_im: Optional real and imaginary parts of S, same shape as R
        ratios: Real per-sample, per-mode factors of shape (B, K)
    """
    batch, c_in, modes = z.shape
    if r_re.shape != r_im.shape or r_re.ndim != 3 or r_re.shape[0] != modes or r_re.shape[2] != c_in:
        raise ShapeError(f"complex_mode_mix: weights {r_re.shape} do not match modes {z.shape}")
    with_s = s_re is not None
    if with_s:
        if s_re.shape != r_re.shape or s_im is None or s_im.shape != r_re.shape:
            raise ShapeError("complex_mode_mix: S must match the shape of R")
        if ratios is None or ratios.shape != (batch, modes):
            raise ShapeError(f"complex_mode_mix: ratios must have shape {(batch, modes)}")

    zk = z.data.transpose(2, 0, 1)  # (K, B, C_in)
    r = r_re.data + 1j * r_im.data
    mixed = np.matmul(zk, r.transpose(0, 2, 1))
    if with_s:
        s = s_re.data + 1j * s_im.data
        s_mixed = np.matmul(zk, s.transpose(0, 2, 1))
        dk = ratios.data.T[:, :, None]
        mixed = mixed + dk * s_mixed
    out = mixed.transpose(1, 2, 0)

    def backward(g):
        gk = g.transpose(2, 0, 1)  # (K, B, C_out)
        g_r = np.matmul(gk.transpose(0, 2, 1), np.conj(zk))
        g_zk = np.matmul(gk, np.conj(r))
        grads = [None, g_r.real, g_r.imag]
        if with_s:
            gd = dk * gk
            g_s = np.matmul(gd.transpose(0, 2, 1), np.conj(zk))
            g_zk = g_zk + np.matmul(gd, np.conj(s))
            g_ratios = np.sum((np.conj(gk) * s_mixed).real, axis=-1).T
            grads += [g_s.real, g_s.imag, g_ratios]
        grads[0] = g_zk.transpose(1, 2, 0)
        return tuple(grads)

    parents = (z, r_re, r_im) + ((s_re, s_im, ratios) if with_s else ())
    return make_node(out, parents, backward, 'complex_mode_mix')


def relative_l2(pred: Tensor, target: Operand) -> Tensor:
    """Per-sample ||pred - target|| / ||target||, reduced over all non-batch axes.

    Returns:
        Tensor of shape (B,)
    """
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"relative_l2: prediction {pred.shape} and target {target.shape} differ")

    axes = tuple(range(1, pred.ndim))
    diff = pred.data - target.data
    diff_norm = np.sqrt(np.sum(diff * diff, axis=axes))
    target_norm = np.maximum(np.sqrt(np.sum(target.data * target.data, axis=axes)),
                             np.finfo(np.float64).tiny)
    out = diff_norm / target_norm

    expand = (slice(None),) + (None,) * len(axes)

    def backward(g):
        safe = np.where(diff_norm > 0.0, diff_norm, 1.0)
        unit = np.where((diff_norm > 0.0)[expand], diff / safe[expand], 0.0)
        g_pred = (g / target_norm)[expand] * unit
        g_target = -g_pred - (g * diff_norm / target_norm ** 3)[expand] * target.data
        return g_pred, g_target

    return make_node(out, (pred, target), backward, 'relative_l2')


def take(x: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """Gather entries along an axis; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (index,), g)
        return (gx,)

    return make_node(out, (x,), backward, 'take')


def batch_scale(x: Tensor, factors: Tensor) -> Tensor:
    """Scale sample b of x by factors[b] (shape (B,) or (B, 1))."""
    batch = x.shape[0]
    if factors.data.size != batch:
        raise ShapeError(f"batch_scale: {factors.shape} factors for a batch of {batch}")

    column = factors.data.reshape((batch,) + (1,) * (x.ndim - 1))
    out = x.data * column

    def backward(g):
        g_factors = np.sum(g * x.data, axis=tuple(range(1, x.ndim)))
        return g * column, g_factors.reshape(factors.shape)

    return make_node(out, (x, factors), backward, 'batch_scale')


def complex_abs(c: Tensor) -> Tensor:
    magnitude = np.abs(c.data)

    def backward(g):
        safe = np.where(magnitude > 0.0, magnitude, 1.0)
        return (np.where(magnitude > 0.0, g * c.data / safe, 0.0),)

    return make_node(magnitude, (c,), backward, 'complex_abs')


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}")

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), backward, 'reshape')
