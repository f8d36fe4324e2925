"""Layer kernels: worked examples, finite-difference oracles, properties."""

import math

import numpy as np
import pytest

from fednilm import tensor as T
from _gradcheck import LAYER_CHECKS, check_conv1d


def arr(*values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, -1)


class TestConv1d:
    def test_identity_kernel(self):
        out = T.conv1d(arr(1, 2, 3), np.ones((1, 1, 1)), np.zeros(1), padding=0)
        assert np.array_equal(out, arr(1, 2, 3))

    def test_centered_delta_kernel(self):
        w = np.array([[[0.0, 1.0, 0.0]]])
        out = T.conv1d(arr(1, 2, 3), w, np.zeros(1), padding=1)
        assert np.array_equal(out, arr(1, 2, 3))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            assert check_conv1d(rng) < 1e-5

    def test_linear_in_input(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 9))
        y = rng.normal(size=(2, 3, 9))
        w = rng.normal(size=(4, 3, 3))
        zero_b = np.zeros(4)
        lhs = T.conv1d(2.5 * x - 1.5 * y, w, zero_b, padding=1)
        rhs = 2.5 * T.conv1d(x, w, zero_b, padding=1) - 1.5 * T.conv1d(y, w, zero_b, padding=1)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.conv1d(arr(1, 2, 3), np.ones((1, 1, 2)), np.zeros(1), padding=0)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv1d(np.zeros((1, 2, 5)), np.ones((1, 3, 3)), np.zeros(1), padding=1)

    def test_too_short_input_names_length_axis(self):
        with pytest.raises(T.ShapeError, match="length"):
            T.conv1d(np.zeros((1, 1, 2)), np.ones((1, 1, 5)), np.zeros(1), padding=0)


class TestAvgPool1d:
    def test_even_split(self):
        out = T.avg_pool1d(arr(1, 2, 3, 4), size=2, stride=2)
        assert np.array_equal(out, arr(1.5, 3.5))

    def test_partial_final_window(self):
        # brute-force oracle: mean over only the available elements
        out = T.avg_pool1d(arr(1, 2, 3), size=2, stride=2)
        assert np.array_equal(out, arr(1.5, 3.0))

    def test_partial_windows_match_brute_force(self):
        # oracle: walk windows until one covers the end or would start outside
        rng = np.random.default_rng(2)
        for _ in range(40):
            length = int(rng.integers(1, 20))
            size = int(rng.integers(1, 8))
            stride = int(rng.integers(1, 6))
            x = rng.normal(size=(1, 2, length))
            got = T.avg_pool1d(x, size, stride)
            expected = []
            start = 0
            while start < length:
                hi = min(start + size, length)
                expected.append(x[:, :, start:hi].mean(axis=2))
                if hi >= length:
                    break
                start += stride
            expected = np.stack(expected, axis=2)
            assert got.shape == expected.shape
            assert np.allclose(got, expected, atol=1e-12)

    def test_identity(self):
        x = np.random.default_rng(3).normal(size=(2, 3, 7))
        assert np.array_equal(T.avg_pool1d(x, 1, 1), x)

    def test_oversized_window_pools_everything(self):
        out = T.avg_pool1d(arr(1, 2, 3), size=10, stride=10)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 2.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(3):
            assert LAYER_CHECKS["avg_pool1d"](rng) < 1e-5

    def test_pool_then_upsample_is_projection(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 12))
        for k in (2, 3, 4):
            once = T.upsample_nearest(T.avg_pool1d(x, k, k), k)
            twice = T.upsample_nearest(T.avg_pool1d(once, k, k), k)
            assert np.allclose(once, twice, atol=1e-12)


class TestUpsampleNearest:
    def test_repeats_elements(self):
        out = T.upsample_nearest(arr(1, 2), factor=3)
        assert np.array_equal(out, arr(1, 1, 1, 2, 2, 2))

    def test_factor_one_identity(self):
        x = np.random.default_rng(6).normal(size=(2, 3, 5))
        assert T.upsample_nearest(x, 1) is x

    def test_backward_sums_repeat_groups(self):
        g = arr(1, 2, 3, 4, 5, 6)
        back = T.upsample_nearest_backward(g, 3)
        assert np.array_equal(back, arr(6, 15))

    def test_bad_factor(self):
        with pytest.raises(ValueError, match="factor"):
            T.upsample_nearest(arr(1, 2), 0)


class TestConcatChannels:
    def test_order_preserved(self):
        a = np.arange(6, dtype=float).reshape(1, 2, 3)
        b = np.arange(100, 103, dtype=float).reshape(1, 1, 3)
        out = T.concat_channels([a, b])
        assert out.shape == (1, 3, 3)
        assert np.array_equal(out[:, :2], a)
        assert np.array_equal(out[:, 2:], b)

    def test_single_input_identity(self):
        a = np.ones((2, 2, 4))
        assert np.array_equal(T.concat_channels([a]), a)

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        parts = [rng.normal(size=(2, c, 5)) for c in (1, 3, 2)]
        cat = T.concat_channels(parts)
        back = T.concat_channels_backward(cat, [1, 3, 2])
        for p, b in zip(parts, back):
            assert np.array_equal(p, b)

    def test_length_mismatch_names_axis(self):
        with pytest.raises(T.ShapeError, match="length"):
            T.concat_channels([np.zeros((1, 1, 3)), np.zeros((1, 1, 4))])


class TestReluDropout:
    def test_relu_values(self):
        assert np.array_equal(T.relu(arr(-1, 0, 2)), arr(0, 0, 2))

    def test_relu_subgradient_zero_at_zero(self):
        g = T.relu_backward(arr(-1.0, 0.0, 2.0), arr(1.0, 1.0, 1.0))
        assert np.array_equal(g, arr(0, 0, 1))

    def test_dropout_p_zero_identity(self):
        x = np.random.default_rng(8).normal(size=(2, 3, 4))
        for training in (True, False):
            out, mult = T.dropout(x, 0.0, np.random.default_rng(0), training)
            assert out is x and mult is None

    def test_dropout_eval_identity(self):
        x = np.ones((1, 2, 3))
        out, mult = T.dropout(x, 0.9, None, training=False)
        assert out is x and mult is None

    def test_dropout_same_seed_same_mask(self):
        x = np.ones((4, 5, 6))
        out1, m1 = T.dropout(x, 0.5, np.random.default_rng(99), True)
        out2, m2 = T.dropout(x, 0.5, np.random.default_rng(99), True)
        assert np.array_equal(m1, m2)
        assert np.array_equal(out1, out2)

    def test_dropout_inverted_scaling(self):
        x = np.ones((1, 1, 10000))
        out, mult = T.dropout(x, 0.25, np.random.default_rng(1), True)
        kept = out[out > 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert abs(out.mean() - 1.0) < 0.05

    def test_dropout_bad_probability(self):
        with pytest.raises(ValueError, match="probability"):
            T.dropout(np.ones((1, 1, 2)), 1.0, np.random.default_rng(0), True)


class TestSoftmaxBce:
    def test_uniform_logits_cost_ln2_per_appliance(self):
        logits = np.zeros((2, 6, 5))
        labels = np.ones((2, 3, 5), dtype=np.uint8)
        loss, grad = T.softmax2_bce(logits, labels)
        assert loss == pytest.approx(3 * math.log(2), rel=1e-12)
        assert grad.shape == logits.shape

    def test_saturated_correct_logits_near_zero_loss(self):
        logits = np.zeros((1, 2, 4))
        logits[:, 1, :] = 20.0
        logits[:, 0, :] = -20.0
        labels = np.ones((1, 1, 4), dtype=np.uint8)
        loss, _ = T.softmax2_bce(logits, labels)
        assert 0.0 <= loss < 1e-6

    def test_loss_non_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            logits = rng.normal(scale=3.0, size=(2, 4, 6))
            labels = (rng.random((2, 2, 6)) < 0.5).astype(np.uint8)
            loss, _ = T.softmax2_bce(logits, labels)
            assert loss >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(3):
            assert LAYER_CHECKS["softmax2_bce"](rng) < 1e-5

    def test_non_binary_label_rejected(self):
        logits = np.zeros((1, 2, 3))
        labels = np.full((1, 1, 3), 2)
        with pytest.raises(ValueError, match="binary"):
            T.softmax2_bce(logits, labels)


class TestSgdMomentum:
    def _pv(self, *values):
        return T.ParamVector(np.asarray(values, dtype=np.float64))

    def test_single_step(self):
        params = self._pv(1.0)
        state = T.OptimizerState(velocity=np.zeros(1), eta=0.1, rho=0.5)
        T.sgd_momentum_step(params, self._pv(2.0), state)
        assert state.velocity[0] == 2.0
        assert params.values[0] == pytest.approx(0.8, abs=0)

    def test_two_steps_recurrence(self):
        params = self._pv(1.0)
        state = T.OptimizerState(velocity=np.zeros(1), eta=0.1, rho=0.5)
        T.sgd_momentum_step(params, self._pv(2.0), state)
        T.sgd_momentum_step(params, self._pv(2.0), state)
        assert state.velocity[0] == 3.0
        assert params.values[0] == pytest.approx(0.5, abs=1e-15)

    def test_zero_momentum_is_plain_sgd(self):
        rng = np.random.default_rng(11)
        w0 = rng.normal(size=50)
        d = rng.normal(size=50)
        params = T.ParamVector(w0.copy())
        state = T.OptimizerState(velocity=np.zeros(50), eta=0.05, rho=0.0)
        T.sgd_momentum_step(params, T.ParamVector(d.copy()), state)
        assert np.array_equal(params.values, w0 - 0.05 * d)

    def test_length_mismatch(self):
        params = self._pv(1.0, 2.0)
        state = T.OptimizerState(velocity=np.zeros(2), eta=0.1, rho=0.5)
        with pytest.raises(T.LayoutError):
            T.sgd_momentum_step(params, self._pv(1.0), state)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            T.OptimizerState(velocity=np.zeros(1), eta=-0.1, rho=0.5)
        with pytest.raises(ValueError):
            T.OptimizerState(velocity=np.zeros(1), eta=0.1, rho=1.0)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        def f(v):
            return float(v[0] ** 2)

        err = T.finite_diff_check(f, np.array([3.0]), np.array([6.0]), epsilon=1e-5)
        assert err < 1e-6

    def test_constant_function(self):
        def f(v):
            return 1.0

        err = T.finite_diff_check(f, np.zeros(5), np.zeros(5), epsilon=1e-5)
        assert err == 0.0

    def test_non_finite_reported(self):
        def f(v):
            return float("nan")

        with pytest.raises(T.OracleError):
            T.finite_diff_check(f, np.zeros(2), np.zeros(2), epsilon=1e-5)

    def test_flags_wrong_gradient(self):
        def f(v):
            return float(v.sum())

        err = T.finite_diff_check(f, np.zeros(3), np.full(3, 2.0), epsilon=1e-5)
        assert err > 0.4


class TestParamVector:
    def test_layout_must_tile_vector(self):
        layout = (
            T.LayoutEntry("a", "weight", (2, 2), 0),
            T.LayoutEntry("b", "weight", (3,), 4),
        )
        T.ParamVector(np.zeros(7), layout)  # fits exactly
        with pytest.raises(T.LayoutError):
            T.ParamVector(np.zeros(8), layout)
        with pytest.raises(T.LayoutError):
            T.ParamVector(np.zeros(7), (layout[0], T.LayoutEntry("b", "weight", (3,), 5)))

    def test_layout_divergence_names_layer(self):
        a = T.ParamVector(np.zeros(4), (T.LayoutEntry("alpha", "weight", (4,), 0),))
        b = T.ParamVector(np.zeros(4), (T.LayoutEntry("beta", "weight", (4,), 0),))
        with pytest.raises(T.LayoutError, match="alpha"):
            T.check_same_layout(a, b)
