"""Unit tests for the reverse-mode differentiation engine."""

import threading

import pytest
import numpy as np

from flamefront.nn import functional as F
from flamefront.nn.tensor import Tensor, grad, is_grad_enabled, no_grad
from flamefront.utils.errors import GraphError, ShapeError

EPS = 1e-6
GRADIENT_SEEDS = range(20)


def random_like(rng, array):
    out = rng.normal(size=np.shape(array))
    if np.iscomplexobj(array):
        out = out + 1j * rng.normal(size=np.shape(array))
    return out


def check_gradients(rng, fn, *arrays, samples=12, rtol=1e-5, atol=1e-7):
    """Compare grad() against central differences of L = Re(sum(conj(w) * fn(...)))."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = random_like(rng, out.data)
    analytic = grad(out, tensors, seed=w)

    def loss(values):
        o = fn(*[Tensor(v) for v in values]).data
        return float(np.sum((np.conj(w) * o).real))

    for i, array in enumerate(arrays):
        assert analytic[i].shape == np.shape(array)
        parts = [1.0, 1j] if np.iscomplexobj(array) else [1.0]
        flat_indices = rng.choice(np.size(array), size=min(samples, np.size(array)), replace=False)
        for flat in flat_indices:
            index = np.unravel_index(flat, np.shape(array))
            for part in parts:
                plus = [np.array(a, copy=True) for a in arrays]
                minus = [np.array(a, copy=True) for a in arrays]
                plus[i][index] += part * EPS
                minus[i][index] -= part * EPS
                numeric = (loss(plus) - loss(minus)) / (2 * EPS)
                value = analytic[i][index]
                expected = value.real if part == 1.0 else np.imag(value)
                assert expected == pytest.approx(numeric, rel=rtol, abs=atol)


@pytest.mark.parametrize("rng", GRADIENT_SEEDS, indirect=True)
class TestOperationGradients:
    """Finite-difference checks of every differentiable operation."""

    def test_elementwise_with_broadcast(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))
        check_gradients(rng, F.add, a, b)
        check_gradients(rng, F.sub, a, b)
        check_gradients(rng, F.mul, a, b)
        check_gradients(rng, lambda x: F.scale(x, -2.5), a)

    def test_complex_multiply(self, rng):
        a = rng.normal(size=(2, 5)) + 1j * rng.normal(size=(2, 5))
        b = rng.normal(size=(2, 5)) + 1j * rng.normal(size=(2, 5))
        check_gradients(rng, F.mul, a, b)

    def test_linear_2d_and_3d(self, rng):
        w, bias = rng.normal(size=(4, 3)), rng.normal(size=4)
        check_gradients(rng, F.linear, rng.normal(size=(5, 3)), w, bias)
        check_gradients(rng, F.linear, rng.normal(size=(2, 3, 8)), w, bias)
        check_gradients(rng, F.linear, rng.normal(size=(2, 3, 8)), w)

    def test_relu(self, rng):
        check_gradients(rng, F.relu, rng.normal(size=(3, 2, 8)))

    def test_periodic_convolution(self, rng):
        x = rng.normal(size=(2, 3, 8))
        check_gradients(rng, F.conv1d_periodic, x, rng.normal(size=(4, 3, 3)), rng.normal(size=4))
        check_gradients(rng, F.conv1d_periodic, x, rng.normal(size=(2, 3, 5)))

    def test_pool_and_upsample(self, rng):
        x = rng.normal(size=(2, 3, 8))
        check_gradients(rng, F.maxpool1d, x)
        check_gradients(rng, F.upsample_nearest, x)

    def test_concat_take_reshape(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 1, 4))
        check_gradients(rng, lambda x, y: F.concat([x, y], axis=1), a, b)
        check_gradients(rng, lambda x: F.take(x, [0, 2, 2], axis=1), a)
        check_gradients(rng, lambda x: F.reshape(x, (2, 12)), a)

    def test_reductions(self, rng):
        x = rng.normal(size=(3, 4))
        check_gradients(rng, F.sum, x)
        check_gradients(rng, F.mean, x)

    def test_fft_pair(self, rng):
        x = rng.normal(size=(2, 3, 16))
        check_gradients(rng, F.rfft, x)
        check_gradients(rng, lambda t: F.rfft(t, modes=4), x)

        c = rng.normal(size=(2, 3, 9)) + 1j * rng.normal(size=(2, 3, 9))
        check_gradients(rng, lambda t: F.irfft(t, 16), c)
        check_gradients(rng, lambda t: F.irfft(t, 16), c[..., :5].copy())

    def test_complex_mode_mix(self, rng):
        batch, c_in, c_out, modes = 2, 3, 4, 5
        z = rng.normal(size=(batch, c_in, modes)) + 1j * rng.normal(size=(batch, c_in, modes))
        weights = [rng.normal(size=(modes, c_out, c_in)) for _ in range(4)]
        ratios = rng.uniform(0.5, 2.0, size=(batch, modes))

        check_gradients(rng, F.complex_mode_mix, z, weights[0], weights[1])
        check_gradients(rng, F.complex_mode_mix, z, *weights, ratios)

    def test_relative_l2(self, rng):
        pred, target = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
        check_gradients(rng, F.relative_l2, pred, target)

    def test_batch_scale_and_abs(self, rng):
        check_gradients(rng, F.batch_scale, rng.normal(size=(3, 2, 4)), rng.normal(size=3))
        c = rng.normal(size=(2, 6)) + 1j * rng.normal(size=(2, 6))
        check_gradients(rng, F.complex_abs, c)

    def test_fft_round_trip_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        y = F.irfft(F.rfft(x), 16)
        w = rng.normal(size=(2, 16))

        assert np.allclose(y.data, x.data)
        assert np.allclose(grad(y, [x], seed=w)[0], w)


class TestGraph:
    """Test graph bookkeeping."""

    def test_backward_accumulates_and_grad_does_not(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        x = Tensor(rng.normal(size=4))
        loss = F.sum(F.mul(w, x))

        (g,) = grad(loss, [w])
        assert w.grad is None
        assert np.allclose(g, x.data)

        loss.backward()
        loss.backward()
        assert np.allclose(w.grad, 2 * x.data)

        w.zero_grad()
        assert w.grad is None

    def test_shared_input_sums_paths(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = F.sum(F.add(F.mul(x, x), F.scale(x, 2.0)))

        assert np.allclose(grad(y, [x])[0], [8.0])

    def test_unused_input_gets_zeros(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)

        assert np.all(grad(F.sum(a), [a, b])[1] == 0.0)

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = F.scale(w, 2.0)
        assert not out.requires_grad
        assert out.is_leaf
        assert is_grad_enabled()

    def test_no_grad_is_per_thread(self):
        seen = []
        with no_grad():
            worker = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            worker.start()
            worker.join()
            assert not is_grad_enabled()
        assert seen == [True]

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = F.scale(y, 1.0)

        assert float(grad(y, [x])[0]) == pytest.approx(1.0)

    def test_detached_output_raises(self):
        with pytest.raises(GraphError):
            grad(F.sum(Tensor(np.ones(3))), [Tensor(np.ones(3), requires_grad=True)])

    def test_detached_input_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            grad(F.sum(w), [w.detach()])

    def test_non_scalar_output_needs_seed(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            grad(F.scale(w, 2.0), [w])


class TestShapeChecks:
    """Test shape validation of operations."""

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_linear_mismatch(self):
        with pytest.raises(ShapeError):
            F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_even_filter_rejected(self):
        with pytest.raises(ShapeError):
            F.conv1d_periodic(Tensor(np.ones((1, 2, 8))), Tensor(np.ones((2, 2, 4))))

    def test_odd_fft_length_rejected(self):
        with pytest.raises(ShapeError):
            F.rfft(Tensor(np.ones((1, 7))))

    def test_relative_l2_mismatch(self):
        with pytest.raises(ShapeError):
            F.relative_l2(Tensor(np.ones((2, 4))), np.ones((2, 5)))
