"""Numerical kernels against independent float64 oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference as ref
from melad import tensor_core as tc
from melad.tensor_core import ConvParams, Tensor


def random_conv_case(rng, h, w, in_ch, out_ch, k, dilation, bias=True):
    x = Tensor(rng.uniform(-1, 1, size=(in_ch, h, w)).astype(np.float32))
    kernel = Tensor(
        rng.uniform(-1, 1, size=(out_ch, in_ch, k, k)).astype(np.float32))
    b = (rng.uniform(-1, 1, size=out_ch).astype(np.float32)
         if bias else None)
    return x, ConvParams(kernel=kernel, bias=b, dilation=dilation)


class TestTensor:
    def test_dims_and_row_major_access(self):
        t = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
        assert t.dims == (2, 3, 4)
        # (c, y, x) -> data[(c*H + y)*W + x]
        assert t.at(1, 2, 3) == t.data.reshape(-1)[(1 * 3 + 2) * 4 + 3]

    def test_out_of_range_access_rejects(self):
        t = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
        with pytest.raises(IndexError):
            t.at(0, 2, 0)

    def test_non_float32_rejects(self):
        with pytest.raises(Exception):
            Tensor(np.zeros((1, 2, 2), dtype=np.float64))

    def test_zero_extent_rejects(self):
        with pytest.raises(Exception):
            Tensor(np.zeros((0, 2, 2), dtype=np.float32))


class TestConvForward:
    def test_hand_case_all_ones_kernel(self):
        x = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3))
        kernel = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        params = ConvParams(kernel=kernel,
                            bias=np.zeros(1, dtype=np.float32), dilation=1)
        out = tc.conv2d_dilated(x, params)
        assert out.at(0, 1, 1) == 45.0  # full window: sum 1..9
        assert out.at(0, 0, 0) == 12.0  # corner window: 1+2+4+5

    def test_impulse_response_reproduces_flipped_kernel(self, rng):
        # out(p) = sum_t in(p + t - m) k(t): a centered delta reads the kernel
        # back out spatially flipped.
        kernel = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)).astype(np.float32))
        x = np.zeros((1, 5, 5), dtype=np.float32)
        x[0, 2, 2] = 1.0
        out = tc.conv2d_dilated(
            Tensor(x), ConvParams(kernel=kernel, bias=None, dilation=1))
        footprint = out.data[0, 1:4, 1:4]
        np.testing.assert_array_equal(footprint, kernel.data[0, 0, ::-1, ::-1])

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    def test_identity_1x1_kernel(self, rng, dilation):
        x = Tensor(rng.uniform(-1, 1, (3, 6, 7)).astype(np.float32))
        kernel = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        out = tc.conv2d_dilated(
            x, ConvParams(kernel=kernel, bias=None, dilation=dilation))
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_direct_oracle_randomized(self, rng):
        max_err = 0.0
        for _ in range(60):
            h, w = rng.integers(1, 13, size=2)
            in_ch, out_ch = rng.integers(1, 5, size=2)
            k = int(rng.choice([1, 3, 5]))
            dilation = int(rng.choice([1, 2, 4, 8]))
            x, params = random_conv_case(rng, h, w, in_ch, out_ch, k, dilation)
            got = tc.conv2d_dilated(x, params).data
            want = ref.conv2d_direct(x.data, params.kernel.data, params.bias,
                                     dilation)
            max_err = max(max_err, float(np.abs(got - want).max()))
        assert max_err <= 1e-5

    def test_batched_matches_per_image(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 5, 5)).astype(np.float32))
        _, params = random_conv_case(rng, 5, 5, 3, 4, 3, 2)
        batched = tc.conv2d_dilated(x, params).data
        for i in range(2):
            single = tc.conv2d_dilated(Tensor(x.data[i]), params).data
            np.testing.assert_array_equal(batched[i], single)

    def test_spatial_size_preserved_all_dilations(self, rng):
        for dilation in (1, 2, 4, 8):
            x, params = random_conv_case(rng, 9, 4, 2, 3, 3, dilation)
            out = tc.conv2d_dilated(x, params)
            assert out.dims == (3, 9, 4)

    def test_linearity(self, rng):
        _, params = random_conv_case(rng, 6, 6, 2, 3, 3, 2, bias=False)
        f1 = rng.uniform(-1, 1, (2, 6, 6)).astype(np.float32)
        f2 = rng.uniform(-1, 1, (2, 6, 6)).astype(np.float32)
        a, b = np.float32(0.7), np.float32(-1.3)
        lhs = tc.conv2d_dilated(Tensor(a * f1 + b * f2), params).data
        rhs = (a * tc.conv2d_dilated(Tensor(f1), params).data
               + b * tc.conv2d_dilated(Tensor(f2), params).data)
        assert np.abs(lhs - rhs).max() <= 1e-5

    def test_channel_mismatch_rejects(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 4, 4)).astype(np.float32))
        _, params = random_conv_case(rng, 4, 4, 3, 2, 3, 1)
        with pytest.raises(Exception, match="channel"):
            tc.conv2d_dilated(x, params)

    def test_even_kernel_rejects(self, rng):
        kernel = Tensor(rng.uniform(-1, 1, (1, 1, 2, 2)).astype(np.float32))
        with pytest.raises(Exception, match="odd"):
            ConvParams(kernel=kernel, bias=None, dilation=1)

    def test_dilation_below_one_rejects(self, rng):
        kernel = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)).astype(np.float32))
        with pytest.raises(Exception, match="dilation"):
            ConvParams(kernel=kernel, bias=None, dilation=0)


class TestConvBackward:
    def test_zero_grad_out_gives_zero_grads(self, rng):
        x, params = random_conv_case(rng, 4, 4, 2, 3, 3, 2)
        grads = tc.conv2d_dilated_backward(
            x, params, Tensor(np.zeros((3, 4, 4), dtype=np.float32)))
        assert not grads.grad_input.data.any()
        assert not grads.grad_kernel.data.any()
        assert not grads.grad_bias.any()

    def test_identity_kernel_passes_grad_through(self, rng):
        x = Tensor(rng.uniform(-1, 1, (1, 4, 4)).astype(np.float32))
        kernel = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        go = Tensor(rng.uniform(-1, 1, (1, 4, 4)).astype(np.float32))
        grads = tc.conv2d_dilated_backward(
            x, ConvParams(kernel=kernel, bias=None, dilation=1), go)
        np.testing.assert_array_equal(grads.grad_input.data, go.data)

    def test_grad_bias_is_sum_over_positions(self, rng):
        x, params = random_conv_case(rng, 5, 3, 2, 4, 3, 1)
        go = Tensor(rng.uniform(-1, 1, (4, 5, 3)).astype(np.float32))
        grads = tc.conv2d_dilated_backward(x, params, go)
        np.testing.assert_allclose(grads.grad_bias, go.data.sum(axis=(1, 2)),
                                   rtol=1e-5)

    def test_shape_mismatch_rejects(self, rng):
        x, params = random_conv_case(rng, 4, 4, 2, 3, 3, 1)
        bad = Tensor(np.zeros((3, 5, 4), dtype=np.float32))
        with pytest.raises(Exception):
            tc.conv2d_dilated_backward(x, params, bad)

    @pytest.mark.parametrize("dilation", [1, 2])
    def test_gradients_match_finite_differences(self, rng, dilation):
        """Criterion-style check: analytic grads vs 64-bit central
        differences of the float64 direct-summation forward."""
        x, params = random_conv_case(rng, 4, 4, 1, 2, 3, dilation)
        go = rng.uniform(-1, 1, (2, 4, 4)).astype(np.float32)
        grads = tc.conv2d_dilated_backward(x, params, Tensor(go))
        go64 = go.astype(np.float64)

        def loss_of_x(x64):
            return float((ref.conv2d_direct(
                x64, params.kernel.data, params.bias, dilation) * go64).sum())

        def loss_of_k(k64):
            return float((ref.conv2d_direct(
                x.data, k64, params.bias, dilation) * go64).sum())

        def loss_of_b(b64):
            return float((ref.conv2d_direct(
                x.data, params.kernel.data, b64, dilation) * go64).sum())

        fd_x = ref.central_difference(loss_of_x, x.data, step=1e-3)
        fd_k = ref.central_difference(loss_of_k, params.kernel.data, step=1e-3)
        fd_b = ref.central_difference(loss_of_b, params.bias, step=1e-3)
        assert ref.relative_error(grads.grad_input.data, fd_x) <= 1e-4
        assert ref.relative_error(grads.grad_kernel.data, fd_k) <= 1e-4
        assert ref.relative_error(grads.grad_bias, fd_b) <= 1e-4


class TestBatchNorm:
    def test_identity_configuration(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3)).astype(np.float32))
        one = np.ones(2, dtype=np.float32)
        zero = np.zeros(2, dtype=np.float32)
        out = tc.batch_norm(x, gamma=one, beta=zero, running_mean=zero,
                            running_var=one, eps=0.0, mode="infer")
        np.testing.assert_array_equal(out.output.data, x.data)

    def test_constant_input_returns_beta(self):
        x = Tensor(np.full((1, 2, 2), 5.0, dtype=np.float32))
        out = tc.batch_norm(
            x,
            gamma=np.ones(1, dtype=np.float32),
            beta=np.full(1, 7.0, dtype=np.float32),
            running_mean=np.full(1, 5.0, dtype=np.float32),
            running_var=np.ones(1, dtype=np.float32),
            mode="infer")
        np.testing.assert_array_equal(out.output.data,
                                      np.full((1, 2, 2), 7.0, np.float32))

    def test_hand_arithmetic(self):
        # (3 - 1)/sqrt(4) * 2 + 1 = 3
        x = Tensor(np.full((1, 1, 1), 3.0, dtype=np.float32))
        out = tc.batch_norm(
            x,
            gamma=np.full(1, 2.0, dtype=np.float32),
            beta=np.full(1, 1.0, dtype=np.float32),
            running_mean=np.full(1, 1.0, dtype=np.float32),
            running_var=np.full(1, 4.0, dtype=np.float32),
            eps=0.0, mode="infer")
        assert out.output.at(0, 0, 0) == 3.0

    def test_infer_mode_is_stateless(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3)).astype(np.float32))
        mean = rng.uniform(-1, 1, 2).astype(np.float32)
        var = rng.uniform(0.5, 2, 2).astype(np.float32)
        out = tc.batch_norm(x, np.ones(2, np.float32), np.zeros(2, np.float32),
                            mean, var, mode="infer")
        np.testing.assert_array_equal(out.running_mean, mean)
        np.testing.assert_array_equal(out.running_var, var)

    def test_train_mode_momentum_update_exact(self, rng):
        x = Tensor(rng.uniform(-1, 1, (4, 2, 3, 3)).astype(np.float32))
        running_mean = rng.uniform(-1, 1, 2).astype(np.float32)
        running_var = rng.uniform(0.5, 2, 2).astype(np.float32)
        out = tc.batch_norm(x, np.ones(2, np.float32),
                            np.zeros(2, np.float32), running_mean,
                            running_var, mode="train", momentum=0.9)
        batch_mean = x.data.mean(axis=(0, 2, 3), dtype=np.float32)
        batch_var = x.data.var(axis=(0, 2, 3), dtype=np.float32)
        np.testing.assert_array_equal(
            out.running_mean,
            np.float32(0.9) * running_mean + np.float32(0.1) * batch_mean)
        np.testing.assert_array_equal(
            out.running_var,
            np.float32(0.9) * running_var + np.float32(0.1) * batch_var)
        np.testing.assert_array_equal(out.batch_mean, batch_mean)

    def test_train_mode_matches_float64_reference(self, rng):
        x = rng.uniform(-1, 1, (3, 2, 4, 4)).astype(np.float32)
        gamma = rng.uniform(0.5, 2, 2).astype(np.float32)
        beta = rng.uniform(-1, 1, 2).astype(np.float32)
        out = tc.batch_norm(Tensor(x), gamma, beta,
                            np.zeros(2, np.float32), np.ones(2, np.float32),
                            eps=1e-5, mode="train")
        want = ref.batch_norm_train(x, gamma, beta, eps=1e-5)
        assert np.abs(out.output.data - want).max() <= 1e-5

    def test_vector_length_mismatch_rejects(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3)).astype(np.float32))
        with pytest.raises(Exception, match="length"):
            tc.batch_norm(x, np.ones(3, np.float32), np.zeros(2, np.float32),
                          np.zeros(2, np.float32), np.ones(2, np.float32))

    def test_backward_matches_finite_differences(self, rng):
        x = rng.uniform(-1, 1, (3, 2, 3, 3)).astype(np.float32)
        gamma = rng.uniform(0.5, 2, 2).astype(np.float32)
        beta = rng.uniform(-1, 1, 2).astype(np.float32)
        go = rng.uniform(-1, 1, x.shape).astype(np.float32)
        grads = tc.batch_norm_backward(Tensor(x), gamma, Tensor(go), eps=1e-5)
        go64 = go.astype(np.float64)

        def loss_of_x(x64):
            return float((ref.batch_norm_train(x64, gamma, beta, 1e-5)
                          * go64).sum())

        def loss_of_gamma(g64):
            return float((ref.batch_norm_train(x, g64, beta, 1e-5)
                          * go64).sum())

        def loss_of_beta(b64):
            return float((ref.batch_norm_train(x, gamma, b64, 1e-5)
                          * go64).sum())

        assert ref.relative_error(
            grads.grad_input.data,
            ref.central_difference(loss_of_x, x, 1e-3)) <= 1e-4
        assert ref.relative_error(
            grads.grad_gamma,
            ref.central_difference(loss_of_gamma, gamma, 1e-3)) <= 1e-4
        assert ref.relative_error(
            grads.grad_beta,
            ref.central_difference(loss_of_beta, beta, 1e-3)) <= 1e-4


class TestActivationsAndPooling:
    def test_relu_hand_values(self):
        x = Tensor(np.array([[[-2.0, 3.0]]], dtype=np.float32))
        out = tc.relu(x)
        assert out.at(0, 0, 0) == 0.0
        assert out.at(0, 0, 1) == 3.0

    def test_relu_backward_matches_finite_differences(self, rng):
        # Keep inputs away from the kink at 0 so h=1e-3 cannot cross it.
        x = rng.uniform(-1, 1, (2, 3, 3)).astype(np.float32)
        x[np.abs(x) < 0.05] = 0.1
        go = rng.uniform(-1, 1, x.shape).astype(np.float32)
        grads = tc.relu_backward(Tensor(x), Tensor(go))
        fd = ref.central_difference(
            lambda x64: float((ref.relu(x64) * go.astype(np.float64)).sum()),
            x, 1e-3)
        assert ref.relative_error(grads.data, fd) <= 1e-4

    def test_global_avg_pool_hand_value(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        np.testing.assert_array_equal(tc.global_avg_pool(x),
                                      np.array([2.5], dtype=np.float32))

    def test_global_avg_pool_backward_matches_finite_differences(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4)).astype(np.float32)
        go = rng.uniform(-1, 1, 2).astype(np.float32)
        grad = tc.global_avg_pool_backward(x.shape, go)
        fd = ref.central_difference(
            lambda x64: float((ref.global_avg_pool(x64)
                               * go.astype(np.float64)).sum()),
            x, 1e-3)
        assert ref.relative_error(grad.data, fd) <= 1e-4


class TestSoftmaxAndLoss:
    def test_softmax_uniform_cases(self):
        np.testing.assert_allclose(
            tc.softmax(np.array([0.0, 0.0], dtype=np.float32)),
            [0.5, 0.5], atol=1e-7)
        out = tc.softmax(np.array([1000.0, 1000.0], dtype=np.float32))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-7)

    def test_softmax_analytic(self):
        out = tc.softmax(np.array([0.0, math.log(3.0)], dtype=np.float32))
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-6)

    def test_softmax_sums_to_one_and_shift_invariant(self, rng):
        for _ in range(50):
            v = rng.uniform(-20, 20, size=2).astype(np.float32)
            out = tc.softmax(v)
            assert abs(float(out.sum()) - 1.0) <= 1e-6
            shifted = tc.softmax(v + np.float32(7.25))
            assert np.abs(out - shifted).max() <= 1e-6

    def test_softmax_rejects_empty_and_non_finite(self):
        with pytest.raises(Exception):
            tc.softmax(np.array([], dtype=np.float32))
        with pytest.raises(Exception):
            tc.softmax(np.array([np.nan, 0.0], dtype=np.float32))

    def test_cross_entropy_perfect_prediction(self):
        loss = tc.categorical_cross_entropy(
            np.array([1.0, 0.0], dtype=np.float32),
            np.array([1.0, 0.0], dtype=np.float32))
        assert 0.0 <= loss <= 1e-11

    def test_cross_entropy_uniform_is_ln2(self):
        loss = tc.categorical_cross_entropy(
            np.array([0.5, 0.5], dtype=np.float32),
            np.array([1.0, 0.0], dtype=np.float32))
        assert abs(loss - math.log(2.0)) <= 1e-6

    def test_logit_gradient_hand_case(self):
        probs = tc.softmax(np.array([0.0, math.log(3.0)], dtype=np.float32))
        grad = tc.cross_entropy_logit_grad(
            probs, np.array([1.0, 0.0], dtype=np.float32))
        np.testing.assert_allclose(grad, [-0.75, 0.75], atol=1e-6)

    def test_logit_gradient_matches_finite_differences(self, rng):
        logits = rng.uniform(-2, 2, size=2).astype(np.float32)
        target = np.array([0.0, 1.0], dtype=np.float32)
        grad = tc.cross_entropy_logit_grad(
            tc.softmax(logits), target)
        fd = ref.central_difference(
            lambda l64: ref.cross_entropy(ref.softmax(l64), target),
            logits, 1e-3)
        assert ref.relative_error(grad, fd) <= 1e-4

    def test_length_mismatch_rejects(self):
        with pytest.raises(Exception):
            tc.categorical_cross_entropy(
                np.array([0.5, 0.5], dtype=np.float32),
                np.array([1.0, 0.0, 0.0], dtype=np.float32))

    def test_unnormalized_prediction_rejects(self):
        with pytest.raises(Exception):
            tc.categorical_cross_entropy(
                np.array([0.9, 0.4], dtype=np.float32),
                np.array([1.0, 0.0], dtype=np.float32))


class TestDeterminism:
    def test_identical_runs_bitwise(self, rng):
        x, params = random_conv_case(rng, 10, 10, 3, 4, 3, 2)
        with tc.engine_threads(deterministic=True):
            a = tc.conv2d_dilated(x, params).data
        with tc.engine_threads(deterministic=True):
            b = tc.conv2d_dilated(x, params).data
        assert a.tobytes() == b.tobytes()

    def test_deterministic_mode_ignores_thread_count(self, rng):
        x, params = random_conv_case(rng, 10, 10, 3, 4, 3, 1)
        outs = []
        for threads in (1, 4):
            with tc.engine_threads(threads=threads, deterministic=True):
                outs.append(tc.conv2d_dilated(x, params).data.tobytes())
        assert outs[0] == outs[1]

    def test_fast_mode_close_to_deterministic(self, rng):
        x, params = random_conv_case(rng, 12, 12, 4, 4, 3, 2)
        with tc.engine_threads(deterministic=True):
            det = tc.conv2d_dilated(x, params).data
        with tc.engine_threads(threads=2):
            fast = tc.conv2d_dilated(x, params).data
        assert np.abs(det - fast).max() <= 1e-5

    def test_bad_thread_count_rejects(self):
        with pytest.raises(ValueError):
            with tc.engine_threads(threads=0):
                pass


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 3),
           st.integers(1, 3), st.sampled_from([1, 2, 4, 8]),
           st.integers(0, 2 ** 31 - 1))
    def test_spatial_preservation(self, h, w, cin, cout, dilation, seed):
        rng = np.random.default_rng(seed)
        x, params = random_conv_case(rng, h, w, cin, cout, 3, dilation)
        assert tc.conv2d_dilated(x, params).dims == (cout, h, w)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_conv_agrees_with_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(1, 9, size=2)
        k = int(rng.choice([1, 3]))
        dilation = int(rng.choice([1, 2, 4]))
        x, params = random_conv_case(rng, h, w, 2, 2, k, dilation)
        got = tc.conv2d_dilated(x, params).data
        want = ref.conv2d_direct(x.data, params.kernel.data, params.bias,
                                 dilation)
        assert np.abs(got - want).max() <= 1e-5

    @settings(max_examples=50)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
           st.floats(-30, 30))
    def test_softmax_shift_invariance(self, logits, shift):
        v = np.array(logits, dtype=np.float32)
        a = tc.softmax(v)
        b = tc.softmax(v + np.float32(shift))
        assert abs(float(a.sum()) - 1.0) <= 1e-6
        assert np.abs(a - b).max() <= 1e-6
