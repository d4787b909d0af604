import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posterior_shield.exceptions import DegenerateError, DomainError, ShapeError
from posterior_shield.simplex import (argmax, check_simplex, l1_distance, normalize,
                                      random_simplex, reverse_sigmoid, sigmoid)

mpmath.mp.dps = 50


def mp_sigmoid(z):
    return float(1 / (1 + mpmath.exp(-mpmath.mpf(z))))


class TestSigmoid:
    def test_symmetry_point(self):
        assert sigmoid(0.0) == 0.5

    def test_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            # 1 - 1e-300 rounds to 1.0; the exact interval (1 - 1e-300, 1] contains 1.0
            assert sigmoid(1000.0) == 1.0
            assert sigmoid(-1000.0) >= 0.0
            out = sigmoid(np.array([-1e4, 0.0, 1e4]))
        assert np.all(np.isfinite(out))

    def test_ten_matches_high_precision(self):
        assert sigmoid(10.0) == pytest.approx(mp_sigmoid(10), rel=1e-15)
        assert str(sigmoid(10.0)).startswith("0.9999546021")

    @pytest.mark.parametrize("z", [-50.0, -10.0, -1e-3, 0.3, 7.5, 36.0])
    def test_scalar_and_array_paths_agree_with_oracle(self, z):
        assert sigmoid(z) == pytest.approx(mp_sigmoid(z), rel=1e-14)
        assert sigmoid(np.array([z]))[0] == pytest.approx(mp_sigmoid(z), rel=1e-14)

    def test_monotone(self):
        z = np.linspace(-40, 40, 2001)
        assert np.all(np.diff(sigmoid(z)) >= 0)


class TestReverseSigmoid:
    def test_half(self):
        assert reverse_sigmoid(0.5) == 0.0

    def test_ln4(self):
        assert reverse_sigmoid(0.8) == pytest.approx(float(mpmath.log(4)), rel=1e-15)

    def test_round_trip(self):
        assert sigmoid(reverse_sigmoid(0.3)) == pytest.approx(0.3, abs=1e-15)

    def test_round_trip_grid(self):
        y = np.linspace(1e-6, 1 - 1e-6, 10001)
        assert np.max(np.abs(sigmoid(reverse_sigmoid(y)) - y)) < 1e-12

    def test_clamps_endpoints(self):
        lo, hi = reverse_sigmoid(0.0), reverse_sigmoid(1.0)
        assert math.isfinite(lo) and math.isfinite(hi)
        assert lo == pytest.approx(-hi)
        assert hi == pytest.approx(math.log((1 - 1e-7) / 1e-7))

    @pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan")])
    def test_domain(self, bad):
        with pytest.raises(DomainError):
            reverse_sigmoid(bad)

    def test_domain_error_is_value_error(self):
        with pytest.raises(ValueError):
            reverse_sigmoid(np.array([0.2, 2.0]))


class TestNormalize:
    def test_proportional(self):
        np.testing.assert_allclose(normalize([0.2, 0.2, 0.4]), [0.25, 0.25, 0.5], atol=1e-15)

    def test_clips_negatives(self):
        np.testing.assert_allclose(normalize([0.9, -0.1, 0.2]), [0.9 / 1.1, 0.0, 0.2 / 1.1],
                                   atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            normalize([0.0, 0.0, 0.0])
        with pytest.raises(DegenerateError):
            normalize([-1.0, -2.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            normalize([0.5, np.inf])

    def test_rejects_k1(self):
        with pytest.raises(ShapeError):
            normalize([1.0])

    def test_batch_rows_independent(self):
        out = normalize(np.array([[1.0, 3.0], [2.0, 2.0]]))
        np.testing.assert_allclose(out, [[0.25, 0.75], [0.5, 0.5]])

    def test_idempotent_on_random_simplex(self, rng):
        p = random_simplex(10000, 7, rng)
        assert np.max(np.abs(normalize(p) - p)) < 1e-12


class TestL1:
    def test_examples(self):
        assert l1_distance([0.7, 0.3], [0.3, 0.7]) == pytest.approx(0.8)
        y = np.array([0.2, 0.5, 0.3])
        assert l1_distance(y, y) == 0.0
        assert l1_distance([1, 0], [0, 1]) == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_distance([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_metric_properties(self, rng):
        a, b, c = (random_simplex(3000, 6, rng) for _ in range(3))
        ab, ba = l1_distance(a, b), l1_distance(b, a)
        assert np.array_equal(ab, ba)
        assert np.all(l1_distance(a, c) <= ab + l1_distance(b, c) + 1e-12)
        assert np.all(ab <= 2 + 1e-12)


class TestArgmax:
    def test_examples(self):
        assert argmax([0.1, 0.7, 0.2], return_max=True) == (1, 0.7)
        assert argmax([0.5, 0.5]) == 0
        assert argmax([0.25] * 4) == 0

    def test_batch_ties(self):
        np.testing.assert_array_equal(argmax(np.array([[0.5, 0.5], [0.2, 0.8]])), [0, 1])


def test_check_simplex(rng):
    p = random_simplex(100, 4, rng)
    np.testing.assert_array_equal(check_simplex(p), p)
    with pytest.raises(DomainError):
        check_simplex(np.array([0.6, 0.6]))
    with pytest.raises(DomainError):
        check_simplex(np.array([1.2, -0.2]))
    with pytest.raises(ShapeError):
        check_simplex(np.array([1.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12))
def test_normalize_output_on_simplex(values):
    v = np.array(values)
    if np.clip(v, 0, None).sum() < 1e-12:
        with pytest.raises(DegenerateError):
            normalize(v)
        return
    out = normalize(v)
    assert out.min() >= 0
    assert abs(out.sum() - 1) <= 1e-9
    assert out.shape == v.shape
