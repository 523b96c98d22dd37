"""Tensor core: op contracts, worked shape examples, finite-difference suite."""

import numpy as np
import pytest

from cellfuse import tensor as T

from helpers import away_from_kinks, check_gradients, rand4


class TestConv2d:
    def test_1x1_scaling(self):
        x = T.Tensor4(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = T.Tensor4(np.full((1, 1, 1, 1), 2.0, dtype=np.float32))
        out = T.conv2d(x, w, [0.0])
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0, dtype=np.float32))

    def test_channel_projection_shape(self):
        # 1280-channel 16x16 grid projected to 64 channels, as in the fusion decoder
        x = T.Tensor4(np.zeros((1, 1280, 16, 16), dtype=np.float32))
        w = T.Tensor4(np.zeros((64, 1280, 1, 1), dtype=np.float32))
        out = T.conv2d(x, w, np.zeros(64))
        assert out.shape == (1, 64, 16, 16)

    def test_channel_mismatch_raises(self):
        x = T.Tensor4(np.zeros((1, 3, 8, 8)))
        w = T.Tensor4(np.zeros((4, 2, 3, 3)))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w, np.zeros(4), padding=1)

    def test_kernel_size_restricted(self):
        x = T.Tensor4(np.zeros((1, 1, 8, 8)))
        w = T.Tensor4(np.zeros((1, 1, 5, 5)))
        with pytest.raises(T.ShapeError):
            T.conv2d(x, w, np.zeros(1))

    def test_identity_1x1_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = T.Tensor4(rng.standard_normal((2, 5, 7, 7)).astype(np.float32))
        eye = np.zeros((5, 5, 1, 1), dtype=np.float32)
        eye[np.arange(5), np.arange(5), 0, 0] = 1.0
        out = T.conv2d(x, T.Tensor4(eye), np.zeros(5))
        np.testing.assert_array_equal(out.data, x.data)

    def test_stride_padding_output_dims(self):
        x = T.Tensor4(np.zeros((1, 2, 9, 9)))
        w = T.Tensor4(np.zeros((3, 2, 3, 3)))
        out = T.conv2d(x, w, np.zeros(3), stride=2, padding=1)
        assert out.shape == (1, 3, 5, 5)  # floor((9 + 2 - 3)/2) + 1

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rand4(rng, (1, 2, 5, 5))
        w = rand4(rng, (3, 2, 3, 3))
        b = rand4(rng, (1, 3, 1, 1))
        check_gradients(lambda: T.sum_all(T.conv2d(x, w, b, padding=1)), [x, w, b])

    def test_forward_bit_identical_across_runs(self):
        rng = np.random.default_rng(2)
        xd = rng.standard_normal((2, 4, 12, 12)).astype(np.float32)
        wd = rng.standard_normal((8, 4, 3, 3)).astype(np.float32)
        bd = rng.standard_normal(8).astype(np.float32)
        runs = [T.conv2d(T.Tensor4(xd), T.Tensor4(wd), bd, padding=1).data for _ in range(3)]
        assert all(np.array_equal(runs[0], r) for r in runs[1:])


class TestPointwiseAndShape:
    def test_upsample_doubles_spatial(self):
        x = T.Tensor4(np.zeros((1, 128, 16, 16), dtype=np.float32))
        assert T.upsample(x, 2, "nearest").shape == (1, 128, 32, 32)
        assert T.upsample(x, 2, "bilinear").shape == (1, 128, 32, 32)

    def test_concat_adds_channels(self):
        a = T.Tensor4(np.zeros((1, 32, 8, 8)))
        b = T.Tensor4(np.zeros((1, 64, 8, 8)))
        assert T.concat_channels(a, b).shape == (1, 96, 8, 8)

    def test_concat_shape_mismatch(self):
        a = T.Tensor4(np.zeros((1, 32, 8, 8)))
        b = T.Tensor4(np.zeros((1, 64, 4, 4)))
        with pytest.raises(T.ShapeError):
            T.concat_channels(a, b)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        x = T.Tensor4(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        p = T.softmax_channels(x)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)

    def test_sigmoid_range(self):
        rng = np.random.default_rng(4)
        x = T.Tensor4(rng.uniform(-50, 50, (1, 4, 6, 6)))
        s = T.sigmoid(x)
        assert np.all(s.data >= 0) and np.all(s.data <= 1)

    @pytest.mark.parametrize("factor", [2, 4])
    def test_nearest_then_avgpool_recovers_input(self, factor):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        up = T.upsample(T.Tensor4(x), factor, "nearest").data
        n, c, h, w = x.shape
        # balanced pairwise mean over f*f equal values is exact for power-of-two f
        pooled = up.reshape(n, c, h, factor, w, factor).mean(axis=(3, 5))
        np.testing.assert_array_equal(pooled, x)

    def test_upsample_factor_one_is_identity(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(T.upsample(T.Tensor4(x), 1, "bilinear").data, x)


class TestBackward:
    def test_relu_gate(self):
        x = T.Tensor4(np.array([-1.0, 2.0]).reshape(1, 2, 1, 1), requires_grad=True)
        loss = T.sum_all(T.relu(x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0])

    def test_zero_scaled_loss_gives_zero_grads(self):
        rng = np.random.default_rng(7)
        x = rand4(rng, (1, 3, 4, 4))
        loss = T.scale(T.sum_all(x), 0.0)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_backward_on_non_scalar_raises(self):
        x = T.Tensor4(np.zeros((1, 2, 2, 2)), requires_grad=True)
        with pytest.raises(T.UsageError):
            T.backward(T.relu(x))

    def test_grad_accumulates_across_calls(self):
        x = T.Tensor4(np.ones((1, 1, 2, 2)), requires_grad=True)
        for _ in range(2):
            T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))

    def test_shared_input_used_twice(self):
        x = T.Tensor4(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = T.add(x, x)
        T.backward(T.sum_all(y))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))

    def test_composite_graph_finite_differences(self):
        # conv -> relu -> upsample -> softmax -> cross-entropy-style reduction
        rng = np.random.default_rng(8)
        x = away_from_kinks(rand4(rng, (1, 2, 4, 4)))
        w = rand4(rng, (3, 2, 3, 3))
        b = rand4(rng, (1, 3, 1, 1))
        target = rng.integers(0, 3, size=(1, 8, 8))
        onehot = np.zeros((1, 3, 8, 8))
        for cls in range(3):
            onehot[:, cls][target == cls] = 1.0

        def build():
            p = T.softmax_channels(T.upsample(T.relu(T.conv2d(x, w, b, padding=1)), 2, "bilinear"))
            # -sum(t * log p) via the node API, as the loss layer does
            logp = np.log(np.maximum(p.data, 1e-12))
            ce = np.array((-onehot * logp).sum(), dtype=p.dtype).reshape(1, 1, 1, 1)

            def backward_fn(g):
                return [-g.reshape(()) * onehot / np.maximum(p.data, 1e-12)]

            return T.from_op(ce, (p,), "ce", backward_fn)

        check_gradients(build, [x, w, b])


@pytest.mark.parametrize("op_name", ["conv2d", "relu", "upsample_nearest",
                                     "upsample_bilinear", "softmax", "sigmoid",
                                     "concat", "add", "scale"])
def test_gradient_sweep_20_random_instances(op_name):
    """Every differentiable op passes fd checks on >= 20 random small tensors."""
    rng = np.random.default_rng(hash(op_name) % 2**32)
    for trial in range(20):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        h = int(rng.integers(2, 5))
        w = int(rng.integers(2, 5))
        x = rand4(rng, (n, c, h, w))
        if op_name == "conv2d":
            co = int(rng.integers(1, 4))
            k = int(rng.choice([1, 3]))
            wt = rand4(rng, (co, c, k, k))
            b = rand4(rng, (1, co, 1, 1))
            pad = 1 if k == 3 else 0
            check_gradients(lambda: T.sum_all(T.conv2d(x, wt, b, padding=pad)), [x, wt, b])
        elif op_name == "relu":
            away_from_kinks(x)
            check_gradients(lambda: T.sum_all(T.relu(x)), [x])
        elif op_name == "upsample_nearest":
            check_gradients(lambda: T.sum_all(T.scale(T.upsample(x, 2, "nearest"), 0.3)), [x])
        elif op_name == "upsample_bilinear":
            check_gradients(lambda: T.sum_all(T.scale(T.upsample(x, 2, "bilinear"), 0.3)), [x])
        elif op_name == "softmax":
            # weight channels unevenly so the softmax Jacobian is exercised
            mix = rng.standard_normal((1, c, 1, 1))

            def build():
                p = T.softmax_channels(x)
                val = np.array((p.data * mix).sum(), dtype=p.dtype).reshape(1, 1, 1, 1)
                return T.from_op(val, (p,), "mix", lambda g: [g.reshape(()) * np.broadcast_to(mix, p.shape)])

            check_gradients(build, [x])
        elif op_name == "sigmoid":
            check_gradients(lambda: T.sum_all(T.sigmoid(x)), [x])
        elif op_name == "concat":
            y = rand4(rng, (n, c + 1, h, w))
            check_gradients(lambda: T.sum_all(T.sigmoid(T.concat_channels(x, y))), [x, y])
        elif op_name == "add":
            y = rand4(rng, (n, c, h, w))
            check_gradients(lambda: T.sum_all(T.sigmoid(T.add(x, y))), [x, y])
        elif op_name == "scale":
            check_gradients(lambda: T.sum_all(T.scale(x, 1.7)), [x])
