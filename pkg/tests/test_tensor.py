"""Primitive numeric helpers: ReLU, activity gates, seeded init."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qagrel.tensor import as_tensor, make_rng, relu, relu_gate, uniform_init


class TestRelu:
    def test_frozen_example(self):
        np.testing.assert_array_equal(relu([-1.0, 0.0, 2.5]), [0.0, 0.0, 2.5])

    def test_gate_frozen_example(self):
        np.testing.assert_array_equal(relu_gate([0.0, 0.001, -3.0, 7.0]), [0.0, 1.0, 0.0, 1.0])

    def test_dtype_is_float64(self):
        assert relu([1, -2]).dtype == np.float64
        assert relu_gate([1, -2]).dtype == np.float64

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_gate_times_activation_is_activation(self, xs):
        y = relu(xs)
        np.testing.assert_array_equal(relu_gate(y) * y, y)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_gate_is_indicator_of_positive_activation(self, xs):
        y = relu(xs)
        np.testing.assert_array_equal(relu_gate(y), (np.asarray(y) > 0).astype(float))


class TestUniformInit:
    def test_range_conv_scale(self):
        w = uniform_init((3, 3, 32, 10), -0.02, 0.02, make_rng(0))
        assert w.min() >= -0.02 and w.max() <= 0.02

    def test_range_fc_scale(self):
        w = uniform_init((500, 100), -0.05, 0.05, make_rng(1))
        assert w.min() >= -0.05 and w.max() <= 0.05

    def test_same_seed_bitwise_identical(self):
        a = uniform_init((40, 40), -0.05, 0.05, make_rng(7))
        b = uniform_init((40, 40), -0.05, 0.05, make_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = uniform_init((40, 40), -0.05, 0.05, make_rng(7))
        b = uniform_init((40, 40), -0.05, 0.05, make_rng(8))
        assert not np.array_equal(a, b)

    def test_mean_near_zero(self):
        # Mean of n uniform(-c, c) draws has sd c/sqrt(3n); allow 4 sigma.
        n = 200_000
        w = uniform_init((n,), -0.05, 0.05, make_rng(3))
        assert abs(w.mean()) < 4 * 0.05 / np.sqrt(3 * n)

    def test_rejects_empty_interval(self):
        with pytest.raises(ValueError):
            uniform_init((2, 2), 0.05, -0.05, make_rng(0))


def test_as_tensor_preserves_float64_identity():
    x = np.zeros(3)
    assert as_tensor(x) is x
    assert as_tensor([1, 2]).dtype == np.float64
