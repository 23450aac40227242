"""Tensor engine: op semantics, autodiff, and finite-difference oracles."""
import numpy as np
import pytest

from hallucinet.engine import (
    BatchNormState,
    NonFiniteError,
    Parameter,
    Tensor,
    activation,
    backward,
    batchnorm,
    bilinear_kernel,
    channel_softmax,
    conv2d,
    finite_diff_check,
    maxpool2,
    mul,
    relu,
    sigmoid,
    transposed_conv2d,
    tsum,
)


def t(arr, grad=False, dtype=None):
    return Tensor(np.asarray(arr), requires_grad=grad, dtype=dtype)


class TestConv2d:
    def test_ones_kernel_border_counts(self):
        x = t(np.ones((1, 1, 3, 3)))
        w = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros(1))
        out = conv2d(x, w, b, stride=1, padding=1).data[0, 0]
        assert out[1, 1] == 9
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4

    def test_delta_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 1, 5, 5)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2d(t(x), t(w), t(np.zeros(1)), stride=1, padding=1)
        assert np.array_equal(out.data, x)

    def test_stride2_shape(self):
        x = t(np.ones((1, 1, 4, 4)))
        w = t(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, t(np.zeros(1)), stride=2, padding=1)
        assert out.data.shape == (1, 1, 2, 2)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 3, 3))), None)

    def test_nonfinite_output_raises(self):
        big = t(np.full((1, 1, 4, 4), 1e30, dtype=np.float32))
        w = t(np.full((1, 1, 3, 3), 1e30, dtype=np.float32))
        with pytest.raises(NonFiniteError):
            conv2d(big, w, None, stride=1, padding=1)


class TestMaxpool:
    def test_window_max(self):
        x = t(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2(x).data.item() == 4.0

    def test_negative_values(self):
        x = t(np.array([[-1.0, -2.0], [-3.0, -4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2(x).data.item() == -1.0

    def test_constant_ties_route_once_per_window(self):
        x = t(np.ones((1, 1, 4, 4)), grad=True)
        out = maxpool2(x)
        assert np.all(out.data == 1.0)
        backward(tsum(out))
        # first element in row-major window order takes the whole gradient
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0
        assert np.array_equal(x.grad[0, 0], expected)

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            maxpool2(t(np.ones((1, 1, 3, 4))))


class TestBatchnorm:
    def test_train_normalizes(self, rng):
        x = t(rng.normal(3.0, 2.0, size=(4, 3, 8, 8)))
        state = BatchNormState(3)
        out = batchnorm(x, t(np.ones(3)), t(np.zeros(3)), state, "train").data
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_infer_uses_running_stats(self):
        state = BatchNormState(2)
        state.running_mean = np.array([1.5, -2.0], dtype=np.float32)
        x = t(np.broadcast_to(np.array([1.5, -2.0], dtype=np.float32)[:, None, None],
                              (2, 4, 4)).reshape(1, 2, 4, 4).copy())
        out = batchnorm(x, t(np.ones(2)), t(np.zeros(2)), state, "infer").data
        assert np.allclose(out, 0.0, atol=1e-5)

    def test_affine_after_normalization(self, rng):
        x = t(rng.normal(size=(4, 2, 8, 8)))
        out = batchnorm(x, t(np.full(2, 2.0)), t(np.full(2, 3.0)),
                        BatchNormState(2), "train").data
        assert np.allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-5)
        assert np.allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-2)

    def test_running_average_advances(self, rng):
        state = BatchNormState(1, momentum=0.1)
        x = t(np.full((2, 1, 4, 4), 5.0))
        batchnorm(x, t(np.ones(1)), t(np.zeros(1)), state, "train")
        assert np.isclose(state.running_mean[0], 0.5)

    def test_single_value_rejected(self):
        with pytest.raises(ValueError):
            batchnorm(t(np.ones((1, 2, 1, 1))), t(np.ones(2)), t(np.zeros(2)),
                      BatchNormState(2), "train")


class TestActivations:
    def test_sigmoid_values(self):
        assert activation(t([0.0]), "sigmoid").data[0] == pytest.approx(0.5)
        assert sigmoid(t([np.log(3.0)])).data[0] == pytest.approx(0.75)

    def test_relu_clamps_negative(self, rng):
        x = rng.normal(size=32)
        out = relu(t(x)).data
        assert np.all(out[x < 0] == 0)
        assert np.allclose(out[x > 0], x[x > 0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(t([1.0]), "tanh")


class TestChannelSoftmax:
    def test_equal_logits_uniform(self):
        p = channel_softmax(t(np.zeros((1, 5, 2, 2)))).data
        assert np.allclose(p, 0.2)

    def test_shift_invariance_and_normalization(self, rng):
        z = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
        p1 = channel_softmax(t(z)).data
        p2 = channel_softmax(t(z + 7.5)).data
        assert np.allclose(p1, p2, atol=1e-6)
        assert np.allclose(p1.sum(axis=1), 1.0, atol=1e-6)

    def test_two_class_value(self):
        p = channel_softmax(t(np.array([2.0, 0.0]).reshape(1, 2, 1, 1))).data.ravel()
        assert p == pytest.approx([0.8808, 0.1192], abs=1e-4)


class TestTransposedConv:
    def test_constant_preserved_by_bilinear(self):
        # oracle: bilinear interpolation of a constant image is that constant
        w = t(bilinear_kernel(1, 8))
        x = t(np.full((1, 1, 6, 6), 1.7, dtype=np.float32))
        up = transposed_conv2d(x, w, stride=4).data
        assert up.shape == (1, 1, 24, 24)
        interior = up[0, 0, 4:-4, 4:-4]
        assert np.allclose(interior, 1.7, atol=1e-5)

    def test_zero_input(self):
        w = t(bilinear_kernel(2, 4))
        out = transposed_conv2d(t(np.zeros((1, 2, 3, 3))), w, stride=2)
        assert np.all(out.data == 0)

    def test_upsample_factor_two(self, rng):
        w = t(rng.normal(size=(3, 2, 4, 4)))
        out = transposed_conv2d(t(rng.normal(size=(1, 3, 4, 4))), w, stride=2)
        assert out.data.shape == (1, 2, 8, 8)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            transposed_conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((3, 1, 4, 4))), 2)


class TestBackward:
    def test_sum_gradient_ones(self, rng):
        p = Parameter(rng.normal(size=(3, 4)), "p")
        backward(tsum(p))
        assert np.array_equal(p.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self, rng):
        v = rng.normal(size=8)
        p = Parameter(v, "p")
        backward(mul(tsum(mul(p, p)), 0.5))
        assert np.allclose(p.grad, v, atol=1e-6)

    def test_non_scalar_root_rejected(self, rng):
        p = Parameter(rng.normal(size=4), "p")
        with pytest.raises(ValueError):
            backward(mul(p, 2.0))

    def test_bit_identical_reruns(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))

        def run():
            xt = Tensor(x, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            y = conv2d(relu(xt), wt, None, stride=1, padding=1)
            backward(tsum(mul(y, y)))
            return xt.grad.copy(), wt.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])

    def test_grad_accumulates_over_reuse(self, rng):
        p = Parameter(rng.normal(size=4), "p")
        backward(tsum(p) + tsum(p))
        assert np.allclose(p.grad, 2.0)


class TestFiniteDiff:
    def test_linear_map_near_exact(self, rng):
        c = rng.normal(size=6)
        err = finite_diff_check(lambda x: tsum(mul(x, Tensor(c, dtype=np.float64))),
                                rng.normal(size=6))
        assert err < 1e-9

    def test_square_derivative(self):
        err = finite_diff_check(lambda x: tsum(mul(x, x)), np.array([3.0]))
        assert err < 1e-8

    def test_relu_positive_slope_one(self):
        err = finite_diff_check(lambda x: tsum(relu(x)), np.array([2.0, 5.0]))
        assert err < 1e-10

    def test_rejects_non_scalar(self, rng):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: mul(x, 2.0), rng.normal(size=3))


def test_tensor_element_count_matches_shape(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    assert x.data.size == 2 * 3 * 4


def test_high_precision_mode_preserved(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), dtype=np.float64)
    out = conv2d(x, w, None, stride=1, padding=1)
    assert out.dtype == np.float64
