import numpy as np
import pytest

import oracles
from msfuse import ops
from msfuse.errors import ConfigError, DimensionError
from msfuse.tensor import Tensor, precision

RTOL = 1e-6


def _rand(rng, shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("shape", [(2, 4, 4, 4), (1, 3, 4, 3), (3, 3, 3, 4)])
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_matches_loop_oracle(shape, stride, pad):
    rng = np.random.default_rng(1)
    x, w, b = _rand(rng, shape), _rand(rng, (3, shape[0], 3, 3, 3)), _rand(rng, 3)
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, oracles.conv3d(x, w, b, stride, pad), rtol=RTOL, atol=1e-5)


@pytest.mark.parametrize("shape", [(2, 4, 4, 4), (3, 3, 2, 4)])
@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_matches_loop_oracle(shape, stride):
    rng = np.random.default_rng(2)
    x, w, b = _rand(rng, shape), _rand(rng, (shape[0], 3, 3, 3)), _rand(rng, shape[0])
    got = ops.depthwise_conv3d(Tensor(x), Tensor(w), Tensor(b), stride, 1).data
    np.testing.assert_allclose(got, oracles.depthwise_conv3d(x, w, b, stride, 1), rtol=RTOL, atol=1e-5)


def test_transposed_depthwise_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    x, w = _rand(rng, (2, 2, 3, 2)), _rand(rng, (2, 3, 3, 3))
    got = ops.transposed_depthwise_conv3d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(got, oracles.transposed_depthwise_conv3d(x, w), rtol=RTOL, atol=1e-5)


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_pool_matches_loop_oracle(mode):
    x = _rand(np.random.default_rng(4), (3, 4, 4, 2))
    np.testing.assert_allclose(ops.pool3d(Tensor(x), mode).data, oracles.pool3d(x, mode), rtol=RTOL)


@pytest.mark.parametrize("factor,direction", [(2, "up"), (4, "up"), (2, "down")])
def test_resize_matches_per_voxel_oracle(factor, direction):
    x = _rand(np.random.default_rng(5), (2, 2, 4, 4))
    got = ops.resize_trilinear(Tensor(x), factor, direction).data
    ext = tuple(n * factor if direction == "up" else n // factor for n in x.shape[1:])
    np.testing.assert_allclose(got, oracles.resize_trilinear(x, ext), rtol=RTOL, atol=1e-6)


def test_gelu_and_pointwise_match_scalar_formulas():
    rng = np.random.default_rng(6)
    x = _rand(rng, (3, 2, 2, 2))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, oracles.gelu(x), rtol=RTOL)
    w, b = _rand(rng, (4, 3)), _rand(rng, 4)
    np.testing.assert_allclose(ops.pointwise_linear(Tensor(x), Tensor(w), Tensor(b)).data,
                               oracles.pointwise(x, w, b), rtol=RTOL, atol=1e-6)


def test_gelu_known_values():
    got = ops.gelu(Tensor(np.array([0.0, 1.0, -1.0]))).data
    np.testing.assert_allclose(got, [0.0, 0.8413447, -0.1586553], atol=1e-6)


def test_float64_inputs_stay_float64():
    with precision(np.float64):
        x = Tensor(np.ones((1, 2, 2, 2)))
    assert ops.conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), None, 1, 1).dtype == np.float64


def test_max_pool_tie_routes_gradient_to_first_element():
    x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    from msfuse.tensor import backward
    backward(ops.pool3d(x, "max").sum())
    assert x.grad.sum() == 1.0 and x.grad[0, 0, 0, 0] == 1.0


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.conv3d(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ops.pool3d(Tensor(np.ones((1, 3, 4, 4))), "avg")
    with pytest.raises(ConfigError):
        ops.pool3d(Tensor(np.ones((1, 4, 4, 4))), "avg", 2, 1)
    with pytest.raises(ConfigError):
        ops.resize_trilinear(Tensor(np.ones((1, 4, 4, 4))), 3)
    with pytest.raises(ConfigError):
        ops.transposed_depthwise_conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 3, 3, 3))), stride=3)


def test_single_precision_gelu_tracks_exact_erf():
    x = np.linspace(-10, 10, 20001)
    got = ops.gelu(Tensor(x.astype(np.float32))).data.astype(np.float64)
    want = oracles.gelu(x)
    assert np.all(np.abs(got - want) <= 3e-7 * np.maximum(1.0, np.abs(x)))
    assert got[0] == 0.0 and got[-1] == np.float32(10.0)


@pytest.mark.parametrize("k,stride", [(1, 1), (5, 1), (5, 2), (7, 2)])
def test_depthwise_other_kernel_sizes(k, stride):
    rng = np.random.default_rng(7)
    x, w = _rand(rng, (2, 9, 8, 10)), _rand(rng, (2, k, k, k))
    pad = k // 2
    got = ops.depthwise_conv3d(Tensor(x), Tensor(w), None, stride, pad).data
    np.testing.assert_allclose(got, oracles.depthwise_conv3d(x, w, None, stride, pad), rtol=RTOL, atol=1e-5)
    if stride == 2:
        xt = _rand(rng, (2, 3, 4, 2))
        got = ops.transposed_depthwise_conv3d(Tensor(xt), Tensor(w)).data
        np.testing.assert_allclose(got, oracles.transposed_depthwise_conv3d(xt, w), rtol=RTOL, atol=1e-5)


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 1), (5, 2)])
def test_depthwise_gradients_match_finite_differences(k, stride):
    from msfuse.tensor import backward
    rng = np.random.default_rng(8)
    with precision(np.float64):
        x = Tensor(_rand(rng, (2, 6, 5, 7)), requires_grad=True)
        w = Tensor(_rand(rng, (2, k, k, k)), requires_grad=True)
    proj = _rand(rng, ops.depthwise_conv3d(x, w, None, stride, k // 2).shape)

    def f():
        return float((ops.depthwise_conv3d(x, w, None, stride, k // 2).data * proj).sum())

    backward((ops.depthwise_conv3d(x, w, None, stride, k // 2) * Tensor(proj)).sum())
    for t in (x, w):
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, 6, replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = f()
            flat[i] = old - 1e-6
            down = f()
            flat[i] = old
            assert abs((up - down) / 2e-6 - t.grad.reshape(-1)[i]) < 1e-6 * max(1.0, abs(t.grad.reshape(-1)[i]))
