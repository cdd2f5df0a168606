"""Network operation contracts: identity cases, brute-force oracles and
finite-difference gradient checks for every differentiable op."""

import numpy as np
import pytest

from dff import ops
from dff.errors import ConfigError, DimensionError
from dff.optim import OptState, poly_lr, sgd_step
from dff.tensor import Tensor, backward, mul, tensor_sum
from helpers import check_gradients, fd_grad, max_rel_err

rng = np.random.default_rng(20240901)


def _rand(*shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = _rand(2, 3, 5, 5)
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = ops.conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_output_spatial_size(self):
        x = _rand(1, 2, 9, 11)
        w = _rand(4, 2, 3, 3)
        out = ops.conv2d(x, w, stride=2, padding=1)
        assert out.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (11 + 2 - 3) // 2 + 1)

    def test_grouped_equals_independent_convs(self):
        # groups=K grouped 1x1 on 4K channels == K separate 1x1 convs
        k = 3
        x = _rand(2, 4 * k, 6, 6)
        w = _rand(k, 4, 1, 1)
        grouped = ops.conv2d(x, w, groups=k)
        pieces = []
        for g in range(k):
            xs = Tensor(x.data[:, 4 * g : 4 * g + 4])
            ws = Tensor(w.data[g : g + 1])
            pieces.append(ops.conv2d(xs, ws).data)
        np.testing.assert_allclose(
            grouped.data, np.concatenate(pieces, axis=1), atol=1e-12, rtol=0
        )

    def test_grouped_3x3_against_slices(self):
        x = _rand(1, 6, 5, 5)
        w = _rand(6, 3, 3, 3)
        grouped = ops.conv2d(x, w, padding=1, groups=2)
        pieces = []
        for g in range(2):
            xs = Tensor(x.data[:, 3 * g : 3 * g + 3])
            ws = Tensor(w.data[3 * g : 3 * g + 3])
            pieces.append(ops.conv2d(xs, ws, padding=1).data)
        np.testing.assert_allclose(
            grouped.data, np.concatenate(pieces, axis=1), atol=1e-12, rtol=0
        )

    @pytest.mark.parametrize(
        "stride,padding,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 1, 2), (2, 0, 4)]
    )
    def test_gradients(self, stride, padding, groups):
        x = _rand(2, 4, 5, 5, grad=True)
        w = _rand(4, 4 // groups, 3, 3, grad=True)
        b = _rand(4, grad=True)
        if (5 + 2 * padding - 3) // stride + 1 < 1:
            pytest.skip("no output")
        check_gradients(
            lambda: tensor_sum(
                ops.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)
            ),
            [x, w, b],
        )

    def test_kernel_size_restriction(self):
        x = _rand(1, 2, 8, 8)
        with pytest.raises(ConfigError):
            ops.conv2d(x, _rand(2, 2, 5, 5))

    def test_groups_must_divide(self):
        x = _rand(1, 6, 4, 4)
        with pytest.raises(ConfigError):
            ops.conv2d(x, _rand(4, 2, 1, 1), groups=4)

    def test_channel_mismatch(self):
        x = _rand(1, 6, 4, 4)
        with pytest.raises(DimensionError):
            ops.conv2d(x, _rand(4, 5, 1, 1))


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        x = Tensor(rng.normal(size=(4, 3, 6, 6)) * 7.0 + 3.0)
        stats = ops.RunningStats(3)
        out = ops.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, "train")
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1.0).max() < 1e-6

    def test_eval_identity_in_eps_limit(self):
        x = _rand(2, 3, 4, 4)
        stats = ops.RunningStats(3)  # mean 0, var 1
        out = ops.batchnorm(
            x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, "eval", eps=1e-14
        )
        np.testing.assert_allclose(out.data, x.data, atol=1e-9)

    def test_running_stats_update(self):
        x = Tensor(np.full((1, 1, 2, 2), 4.0))
        stats = ops.RunningStats(1)
        ops.batchnorm(
            x, Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, "train", momentum=0.5
        )
        np.testing.assert_allclose(stats.mean, [2.0])  # 0.5*0 + 0.5*4
        np.testing.assert_allclose(stats.var, [0.5])  # 0.5*1 + 0.5*0

    def test_single_element_zero_variance_ok(self):
        x = Tensor(np.full((1, 2, 1, 1), 3.0))
        stats = ops.RunningStats(2)
        out = ops.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
        assert np.isfinite(out.data).all()

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        x = _rand(2, 3, 4, 4, grad=True)
        gamma = Tensor(rng.normal(size=3) + 1.0, requires_grad=True)
        beta = _rand(3, grad=True)
        stats = ops.RunningStats(3)
        stats.mean[:] = rng.normal(size=3) * 0.2
        stats.var[:] = 1.0 + rng.random(3)
        frozen = (stats.mean.copy(), stats.var.copy())
        coeff = Tensor(rng.normal(size=(2, 3, 4, 4)))

        def build():
            stats.mean[:], stats.var[:] = frozen
            return tensor_sum(
                mul(ops.batchnorm(x, gamma, beta, stats, mode), coeff)
            )

        check_gradients(build, [x, gamma, beta])

    def test_channel_mismatch(self):
        x = _rand(1, 3, 2, 2)
        with pytest.raises(DimensionError):
            ops.batchnorm(
                x, Tensor(np.ones(4)), Tensor(np.zeros(4)), ops.RunningStats(4), "train"
            )

    def test_bad_mode(self):
        x = _rand(1, 1, 2, 2)
        with pytest.raises(ConfigError):
            ops.batchnorm(
                x, Tensor(np.ones(1)), Tensor(np.zeros(1)), ops.RunningStats(1), "test"
            )


def bilinear_oracle(x: np.ndarray, factor: int) -> np.ndarray:
    """Direct bilinear interpolation with zero-valued virtual border samples.

    Output pixel o samples source coordinate (o + 0.5)/factor - 0.5, which
    is exactly what the transposed convolution with the standard bilinear
    kernel computes away from clamping.
    """
    h, w = x.shape
    oh, ow = h * factor, w * factor

    def sample(i, j):
        return x[i, j] if 0 <= i < h and 0 <= j < w else 0.0

    out = np.zeros((oh, ow))
    for oy in range(oh):
        for ox in range(ow):
            sy = (oy + 0.5) / factor - 0.5
            sx = (ox + 0.5) / factor - 0.5
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            fy, fx = sy - y0, sx - x0
            out[oy, ox] = (
                (1 - fy) * (1 - fx) * sample(y0, x0)
                + (1 - fy) * fx * sample(y0, x0 + 1)
                + fy * (1 - fx) * sample(y0 + 1, x0)
                + fy * fx * sample(y0 + 1, x0 + 1)
            )
    return out


class TestUpsample:
    def test_factor_one_identity(self):
        x = _rand(1, 2, 4, 4)
        layer = ops.Upsample(2, 1)
        np.testing.assert_allclose(layer.forward(x).data, x.data, atol=1e-15)

    @pytest.mark.parametrize("factor", [2, 3, 4])
    def test_constant_preserved_in_interior(self, factor):
        x = Tensor(np.full((1, 1, 6, 6), 3.25))
        layer = ops.Upsample(1, factor)
        out = layer.forward(x).data
        k = 2 * factor - factor % 2
        interior = out[:, :, k:-k, k:-k]
        np.testing.assert_allclose(interior, 3.25, atol=1e-12)

    def test_matches_direct_bilinear_oracle(self):
        x2 = rng.normal(size=(2, 2))
        out = ops.Upsample(1, 2).forward(Tensor(x2.reshape(1, 1, 2, 2))).data[0, 0]
        np.testing.assert_allclose(out, bilinear_oracle(x2, 2), atol=1e-10, rtol=0)

    def test_matches_oracle_factor3(self):
        x = rng.normal(size=(3, 4))
        out = ops.Upsample(1, 3).forward(Tensor(x.reshape(1, 1, 3, 4))).data[0, 0]
        np.testing.assert_allclose(out, bilinear_oracle(x, 3), atol=1e-10, rtol=0)

    @pytest.mark.parametrize("factor", [2, 3])
    def test_gradients(self, factor):
        x = _rand(1, 2, 3, 3, grad=True)
        layer = ops.Upsample(2, factor, "learned_transposed")
        coeff = _rand(1, 2, 3 * factor, 3 * factor)
        check_gradients(
            lambda: tensor_sum(mul(ops.upsample(x, layer.kernel, factor), coeff)),
            [x, layer.kernel],
        )

    def test_invalid_factor(self):
        with pytest.raises(ConfigError):
            ops.Upsample(1, 0)

    def test_frozen_kernel_is_buffer(self):
        fixed = ops.Upsample(3, 2)
        assert fixed.named_parameters("u") == []
        assert len(fixed.named_buffers("u")) == 1
        learned = ops.Upsample(3, 2, "learned_transposed")
        assert len(learned.named_parameters("u")) == 1
        assert learned.named_buffers("u") == []


class TestGlobalAvgPool:
    def test_constant(self):
        x = Tensor(np.full((2, 3, 4, 5), 2.5))
        np.testing.assert_allclose(ops.global_avg_pool(x).data, 2.5)

    def test_1x1_identity(self):
        x = _rand(2, 3, 1, 1)
        np.testing.assert_array_equal(
            ops.global_avg_pool(x).data, x.data.reshape(2, 3)
        )

    def test_gradient(self):
        x = _rand(2, 3, 4, 4, grad=True)
        coeff = _rand(2, 3)
        err = check_gradients(
            lambda: tensor_sum(mul(ops.global_avg_pool(x), coeff)), [x], rtol=1e-6
        )
        assert err < 1e-6


class TestFullyConnected:
    def test_identity_weight(self):
        x = _rand(3, 4)
        out = ops.fully_connected(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        x = _rand(3, 4)
        b = rng.normal(size=2)
        out = ops.fully_connected(x, Tensor(np.zeros((2, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))

    def test_gradients(self):
        x = _rand(3, 4, grad=True)
        w = _rand(5, 4, grad=True)
        b = _rand(5, grad=True)
        coeff = _rand(3, 5)
        check_gradients(
            lambda: tensor_sum(mul(ops.fully_connected(x, w, b), coeff)), [x, w, b]
        )

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ops.fully_connected(_rand(3, 4), _rand(5, 3))


class TestActivations:
    def test_relu_values(self):
        out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_values(self):
        assert ops.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
        assert ops.sigmoid(Tensor(np.array([700.0]))).data[0] == pytest.approx(1.0)
        assert np.isfinite(ops.sigmoid(Tensor(np.array([-700.0]))).data).all()

    def test_softmax_group_symmetry(self):
        x = Tensor(np.zeros((1, 4, 2, 2)))
        np.testing.assert_allclose(ops.softmax_group(x, 4).data, 0.25)

    def test_softmax_group_matches_exp_normalize(self):
        x = _rand(2, 8, 3, 3)
        out = ops.softmax_group(x, 4).data
        ref = np.empty_like(out)
        for n in range(2):
            for g in range(2):
                for i in range(3):
                    for j in range(3):
                        e = np.exp(x.data[n, 4 * g : 4 * g + 4, i, j])
                        ref[n, 4 * g : 4 * g + 4, i, j] = e / e.sum()
        np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)

    def test_softmax_group_indivisible(self):
        with pytest.raises(ConfigError):
            ops.softmax_group(_rand(1, 6, 2, 2), 4)

    def test_activation_dispatcher(self):
        x = _rand(1, 4, 2, 2)
        np.testing.assert_array_equal(
            ops.activation(x, "relu").data, ops.relu(x).data
        )
        with pytest.raises(ConfigError):
            ops.activation(x, "tanh")
        with pytest.raises(ConfigError):
            ops.activation(x, "softmax_group")  # group_size missing

    @pytest.mark.parametrize("kind", ["relu", "sigmoid"])
    def test_elementwise_gradients(self, kind):
        x = Tensor(rng.normal(size=(2, 3, 3, 3)) + 0.1, requires_grad=True)
        coeff = _rand(2, 3, 3, 3)
        check_gradients(
            lambda: tensor_sum(mul(ops.activation(x, kind), coeff)), [x]
        )

    def test_softmax_group_gradient(self):
        x = _rand(1, 8, 2, 2, grad=True)
        coeff = _rand(1, 8, 2, 2)
        check_gradients(
            lambda: tensor_sum(mul(ops.softmax_group(x, 4), coeff)), [x]
        )


class TestSgd:
    def test_plain_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = OptState([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([p], [np.array([1.0])], state)
        np.testing.assert_allclose(p.data, [0.9])

    def test_zero_grad_no_motion(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = OptState([p], lr=0.5, momentum=0.7, weight_decay=0.0)
        for _ in range(3):
            sgd_step([p], [np.array([0.0])], state)
        np.testing.assert_array_equal(p.data, [2.0])

    def test_momentum_recurrence(self):
        # v1 = 1, p1 = -0.1; v2 = 0.9*1 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = OptState([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([p], [np.array([1.0])], state)
        np.testing.assert_allclose(p.data, [-0.1])
        sgd_step([p], [np.array([1.0])], state)
        np.testing.assert_allclose(p.data, [-0.29])
        np.testing.assert_allclose(state.velocities[0], [1.9])

    def test_weight_decay_coupled(self):
        # v = g + wd*p = 1 + 0.1*2 = 1.2; p = 2 - 0.5*1.2 = 1.4
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = OptState([p], lr=0.5, momentum=0.0, weight_decay=0.1)
        sgd_step([p], [np.array([1.0])], state)
        np.testing.assert_allclose(p.data, [1.4])

    def test_negative_lr_rejected(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        with pytest.raises(ConfigError):
            OptState([p], lr=-0.1)


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0.08, 0, 100) == 0.08
        assert poly_lr(0.08, 100, 100) == 0.0

    def test_halfway(self):
        assert poly_lr(0.08, 50, 100, power=0.9) == pytest.approx(
            0.08 * 0.5**0.9, abs=1e-15
        )

    def test_past_end_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            assert poly_lr(0.1, 101, 100) == 0.0

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            poly_lr(0.1, 0, 0)
        with pytest.raises(ConfigError):
            poly_lr(0.1, -1, 10)
