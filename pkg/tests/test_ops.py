import numpy as np
import pytest

from invomed import ops
from invomed.tensor import Rng

import oracles


def make_inv(rng, c, k=3, g=1, r=None, stride=1, sigma="relu", with_bias=True):
    return ops.init_involution_params(rng, c, kernel_size=k, groups=g, reduction=r,
                                      stride=stride, sigma=sigma, with_bias=with_bias)


class TestInvolution:
    def test_identity_delta_kernel(self):
        # zero meta-weights, bias1 one-hot at the center tap -> identity map
        p = make_inv(Rng(0), c=4, k=3, g=1, r=2)
        p.w0[:] = 0.0
        p.b0[:] = 0.0
        p.w1[:] = 0.0
        p.b1[:] = 0.0
        center = (1 * 3 + 1) * 1  # row-major (u=1, v=1, g=0) for K=3
        p.b1[center] = 1.0
        x = Rng(5).normal([2, 6, 5, 4])
        assert np.array_equal(ops.involution2d(x, p), x)

    def test_zero_kernel(self):
        p = make_inv(Rng(0), c=2, r=2)
        p.w1[:] = 0.0
        p.b1[:] = 0.0
        x = Rng(1).normal([1, 4, 4, 2])
        assert np.array_equal(ops.involution2d(x, p), np.zeros_like(x))

    def test_matches_loop_oracle_seed11(self):
        rng = Rng(11)
        p = make_inv(rng, c=2, k=3, g=1, r=2)
        x = rng.normal([1, 5, 5, 2])
        got = ops.involution2d(x, p)
        want, _ = oracles.involution_loops(x, p.w0, p.b0, p.w1, p.b1, 3, 1)
        assert np.max(np.abs(got - want)) < 1e-10

    @pytest.mark.parametrize("c,k,g,r,stride", [
        (2, 3, 1, 2, 1), (4, 3, 2, 2, 1), (6, 5, 2, 3, 1),
        (3, 3, 3, 3, 1), (4, 1, 1, 4, 1), (2, 3, 1, 1, 2), (4, 3, 2, 4, 2),
    ])
    def test_matches_loop_oracle_grid(self, c, k, g, r, stride):
        rng = Rng(100 + c * k + g + r + stride)
        p = make_inv(rng, c=c, k=k, g=g, r=r, stride=stride)
        x = rng.normal([2, 6, 7, c])
        got = ops.involution2d(x, p)
        want, _ = oracles.involution_loops(x, p.w0, p.b0, p.w1, p.b1, k, g, stride)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10

    def test_no_bias_matches_oracle(self):
        rng = Rng(17)
        p = make_inv(rng, c=4, r=2, with_bias=False)
        x = rng.normal([1, 5, 4, 4])
        want, _ = oracles.involution_loops(x, p.w0, None, p.w1, None, 3, 1)
        assert np.max(np.abs(ops.involution2d(x, p) - want)) < 1e-10

    def test_bn_relu_infer_matches_oracle(self):
        rng = Rng(23)
        p = make_inv(rng, c=4, r=2, sigma="bn_relu")
        p.run_mean[:] = rng.normal([2]) * 0.1
        p.run_var[:] = 1.0 + rng.uniform([2])
        x = rng.normal([1, 4, 4, 4])
        got = ops.involution2d(x, p, mode="infer")
        # fold gamma/beta into the oracle's plain-normalization path
        want, _ = oracles.involution_loops(x, p.w0, p.b0, p.w1, p.b1, 3, 1,
                                           bn_stats=(p.run_mean, p.run_var))
        assert np.max(np.abs(got - want)) < 1e-10

    def test_stride1_preserves_spatial(self):
        for h, w in [(5, 5), (8, 6), (7, 9)]:
            p = make_inv(Rng(2), c=2, r=2)
            x = Rng(3).normal([1, h, w, 2])
            assert ops.involution2d(x, p).shape == (1, h, w, 2)

    def test_channel_agnostic_within_group(self):
        # constant-but-nontrivial kernels (weights zero, biases random):
        # the operator must commute with intra-group channel permutation
        rng = Rng(31)
        p = make_inv(rng, c=6, g=2, r=3)
        p.w0[:] = 0.0
        p.w1[:] = 0.0
        p.b0[:] = rng.normal([2])
        p.b1[:] = rng.normal([18])
        x = rng.normal([1, 5, 5, 6])
        perm = np.array([2, 0, 1, 3, 5, 4])  # permutes inside each 3-channel group
        assert np.allclose(ops.involution2d(x[..., perm], p),
                           ops.involution2d(x, p)[..., perm], atol=1e-12)

    def test_kernel_generation_is_positionwise(self):
        from invomed.autodiff import Tape

        rng = Rng(41)
        p = make_inv(rng, c=2, r=2)
        p.w0 = np.abs(p.w0) + 0.1  # keep the bottleneck ReLU active
        p.b0[:] = 1.0
        x = rng.uniform([1, 6, 6, 2])

        def kernels_of(inp):
            t = Tape()
            ops.involution2d(t.leaf(inp), p)
            return t.nodes[-1].ctx["kernels"].copy()

        base = kernels_of(x)
        x2 = x.copy()
        x2[0, 2, 3, :] += 1.0
        diff = np.abs(kernels_of(x2) - base).reshape(6, 6, -1).max(axis=-1)
        assert np.argwhere(diff > 0).tolist() == [[2, 3]]

    def test_divisibility_errors(self):
        with pytest.raises(ValueError):
            make_inv(Rng(0), c=3, g=2, r=3)
        with pytest.raises(ValueError):
            make_inv(Rng(0), c=4, g=1, r=3)
        with pytest.raises(ValueError):
            make_inv(Rng(0), c=4, k=2, r=2)


class TestInvolutionParamCount:
    def test_examples(self):
        assert ops.involution_param_count(2, 3, 1, 2, True) == 21
        assert ops.involution_param_count(4, 3, 1, 4, False) == 13

    def test_degenerate_1x1(self):
        for c in (1, 2, 5, 16):
            assert ops.involution_param_count(c, 1, 1, c, False) == c + 1

    def test_matches_allocated_arrays(self):
        for c, k, g, r, bias, sigma in [(4, 3, 2, 2, True, "relu"), (6, 5, 3, 3, False, "relu"),
                                        (4, 3, 1, 4, True, "bn_relu")]:
            p = ops.init_involution_params(Rng(0), c, k, g, r, sigma=sigma, with_bias=bias)
            arrays = [p.w0, p.w1] + ([p.b0, p.b1] if bias else []) \
                + ([p.gamma0, p.beta0] if sigma == "bn_relu" else [])
            assert ops.involution_param_count(c, k, g, r, bias, sigma) == sum(a.size for a in arrays)


class TestConv:
    def test_1x1_identity(self):
        p = ops.ConvParams(np.ones([1, 1, 1, 1]), np.zeros([1]))
        x = Rng(0).normal([2, 4, 4, 1])
        assert np.array_equal(ops.conv2d(x, p), x)

    def test_zero_kernel_constant_bias(self):
        p = ops.ConvParams(np.zeros([3, 3, 2, 4]), np.full([4], 2.5))
        out = ops.conv2d(Rng(1).normal([1, 5, 5, 2]), p)
        assert np.array_equal(out, np.full([1, 5, 5, 4], 2.5))

    def test_matches_loop_oracle(self):
        rng = Rng(3)
        k = rng.normal([3, 3, 1, 2])
        b = rng.normal([2])
        x = rng.normal([1, 4, 4, 1])
        got = ops.conv2d(x, ops.ConvParams(k, b))
        assert np.max(np.abs(got - oracles.conv2d_loops(x, k, b))) < 1e-10

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_grid_against_oracle(self, stride, padding):
        rng = Rng(stride * 10 + len(padding))
        k = rng.normal([3, 3, 2, 3])
        b = rng.normal([3])
        x = rng.normal([2, 6, 7, 2])
        got = ops.conv2d(x, ops.ConvParams(k, b, stride, padding))
        want = oracles.conv2d_loops(x, k, b, stride, padding)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10

    def test_same_stride1_preserves_spatial(self):
        p = ops.init_conv_params(Rng(2), 3, 5)
        out = ops.conv2d(Rng(4).normal([1, 9, 11, 3]), p)
        assert out.shape == (1, 9, 11, 5)

    def test_channel_mismatch_error(self):
        with pytest.raises(ValueError):
            ops.conv2d(Rng(0).normal([1, 4, 4, 3]), ops.ConvParams(np.zeros([3, 3, 2, 4]), np.zeros(4)))


class TestConvTranspose:
    def test_adjointness(self):
        rng = Rng(5)
        for stride, hw in [(1, 6), (2, 8)]:
            k = rng.normal([3, 3, 2, 4])
            p = ops.ConvParams(k, np.zeros(4), stride=stride)
            pt = ops.ConvParams(k, np.zeros(2), stride=stride)
            x = rng.normal([2, hw, hw, 2])
            y = rng.normal([2, hw // stride, hw // stride, 4])
            lhs = float(np.sum(ops.conv2d(x, p) * y))
            rhs = float(np.sum(x * ops.conv2d_transpose(y, pt)))
            assert abs(lhs - rhs) < 1e-9

    def test_zero_input(self):
        p = ops.init_conv_params(Rng(0), 2, 3, kernel_size=2, stride=2, transpose=True)
        out = ops.conv2d_transpose(np.zeros([1, 4, 4, 2]), p)
        assert np.array_equal(out, np.zeros([1, 8, 8, 3]))

    def test_1x1_identity(self):
        p = ops.ConvParams(np.ones([1, 1, 1, 1]), np.zeros(1), stride=1)
        x = Rng(9).normal([1, 5, 5, 1])
        assert np.allclose(ops.conv2d_transpose(x, p), x)

    def test_stride2_doubles_spatial(self):
        p = ops.init_conv_params(Rng(0), 8, 4, kernel_size=2, stride=2, transpose=True)
        out = ops.conv2d_transpose(Rng(1).normal([1, 5, 6, 8]), p)
        assert out.shape == (1, 10, 12, 4)


class TestMaxpool:
    def test_constant(self):
        x = np.full([1, 4, 4, 2], 3.0)
        out, _ = ops.maxpool2d(x)
        assert np.array_equal(out, np.full([1, 2, 2, 2], 3.0))

    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out, idx = ops.maxpool2d(x)
        assert out[0, 0, 0, 0] == 4.0
        assert idx[0, 0, 0, 0] == 3  # flat index of the 4

    def test_matches_loop_oracle(self):
        x = Rng(9).normal([1, 6, 6, 3])
        out, _ = ops.maxpool2d(x)
        assert np.array_equal(out, oracles.maxpool_loops(x))

    def test_odd_extent_floor_vs_ceil(self):
        x = Rng(10).normal([1, 7, 7, 2])
        floor_out, _ = ops.maxpool2d(x, ceil_mode=False)
        ceil_out, _ = ops.maxpool2d(x, ceil_mode=True)
        assert floor_out.shape == (1, 3, 3, 2)
        assert ceil_out.shape == (1, 4, 4, 2)
        assert np.array_equal(floor_out, oracles.maxpool_loops(x, ceil_mode=False))
        assert np.array_equal(ceil_out, oracles.maxpool_loops(x, ceil_mode=True))

    def test_tie_routes_to_lowest_flat_index(self):
        x = np.zeros([1, 2, 2, 1])
        _, idx = ops.maxpool2d(x)
        assert idx[0, 0, 0, 0] == 0


class TestBatchnorm:
    def test_train_moments(self):
        rng = Rng(13)
        x = rng.normal([4, 5, 5, 3]) * 2.0 + 1.0
        gamma, beta = np.array([1.5, 2.0, 0.5]), np.array([-1.0, 0.0, 3.0])
        state = {"mean": np.zeros(3), "var": np.ones(3)}
        out = ops.batchnorm(x, gamma, beta, state, mode="train")
        assert np.max(np.abs(out.mean(axis=(0, 1, 2)) - beta)) < 1e-6
        assert np.max(np.abs(out.std(axis=(0, 1, 2)) - np.abs(gamma))) < 1e-3

    def test_standardized_fixed_point(self):
        rng = Rng(14)
        x = rng.normal([8, 4, 4, 2])
        x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
        state = {"mean": np.zeros(2), "var": np.ones(2)}
        out = ops.batchnorm(x, np.ones(2), np.zeros(2), state, mode="train")
        assert np.max(np.abs(out - x)) < 1e-4

    def test_infer_identity_stats(self):
        x = Rng(15).normal([2, 3, 3, 2])
        state = {"mean": np.zeros(2), "var": np.ones(2)}
        out = ops.batchnorm(x, np.ones(2), np.zeros(2), state, mode="infer")
        assert np.max(np.abs(out - x)) < 1e-4

    def test_running_stats_update(self):
        x = Rng(16).normal([4, 4, 4, 1]) + 5.0
        state = {"mean": np.zeros(1), "var": np.ones(1)}
        ops.batchnorm(x, np.ones(1), np.zeros(1), state, mode="train", momentum=0.9)
        assert abs(state["mean"][0] - 0.1 * x.mean()) < 1e-12


class TestDropout:
    def test_rate_zero_identity(self):
        x = Rng(0).normal([3, 3])
        out, mask = ops.dropout(x, 0.0, Rng(1), "train")
        assert np.array_equal(out, x)
        assert np.all(mask == 1.0)

    def test_infer_identity(self):
        x = Rng(0).normal([3, 3])
        out, _ = ops.dropout(x, 0.9, None, "infer")
        assert np.array_equal(out, x)

    def test_statistics(self):
        x = np.ones([100000])
        out, mask = ops.dropout(x, 0.1, Rng(77), "train")
        zero_frac = float(np.mean(out == 0.0))
        assert 0.09 <= zero_frac <= 0.11
        assert abs(float(np.mean(out)) - 1.0) < 0.02


class TestDenseActivations:
    def test_relu(self):
        assert np.array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_softmax_constant(self):
        out = ops.softmax(np.full([1, 7], 3.0))
        assert np.max(np.abs(out - 1.0 / 7.0)) < 1e-12

    def test_softmax_rows_sum_to_one(self):
        out = ops.softmax(Rng(2).normal([5, 9]))
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12

    def test_dense_against_loop_oracle(self):
        rng = Rng(6)
        x, w, b = rng.normal([3, 5]), rng.normal([5, 4]), rng.normal([4])
        assert np.max(np.abs(ops.dense(x, w, b) - oracles.dense_loops(x, w, b))) < 1e-10

    def test_sigmoid_range(self):
        out = ops.sigmoid(Rng(3).normal([100]) * 10)
        assert np.all(out > 0) and np.all(out < 1)


class TestConcat:
    def test_shapes(self):
        a, b = Rng(0).normal([1, 2, 2, 3]), Rng(1).normal([1, 2, 2, 5])
        assert ops.concat(a, b).shape == (1, 2, 2, 8)

    def test_roundtrip_slices(self):
        a, b = Rng(2).normal([2, 3, 3, 2]), Rng(3).normal([2, 3, 3, 4])
        out = ops.concat(a, b)
        assert np.array_equal(out[..., :2], a)
        assert np.array_equal(out[..., 2:], b)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            ops.concat(Rng(0).normal([1, 2, 2, 1]), Rng(0).normal([1, 3, 2, 1]))


def test_default_reduction_rule():
    assert ops.default_reduction(3) == 3
    assert ops.default_reduction(64) == 4
    assert ops.default_reduction(2) == 2
    assert ops.default_reduction(7) == 1  # no divisor of 7 in 2..4
