import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esnet import oracles, pooling
from esnet.errors import ContractViolationError, InvalidInputError


def chan(values) -> np.ndarray:
    """A single-channel feature map from a flat list."""
    return np.asarray(values, dtype=np.float64).reshape(1, 1, -1)


class TestGap:
    def test_mean(self):
        assert pooling.gap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == 2.5

    def test_zeros(self):
        assert pooling.gap(np.zeros((2, 3, 3)))[0] == 0.0

    def test_single_element(self):
        assert pooling.gap(np.array([[[5.0]]]))[0] == 5.0

    def test_empty_extent_rejected(self):
        with pytest.raises(InvalidInputError):
            pooling.gap(np.zeros((2, 0, 3)))


class TestGmp:
    def test_max(self):
        assert pooling.gmp(np.array([[[1.0, 2.0], [3.0, 4.0]]]))[0] == 4.0

    def test_constant(self):
        assert pooling.gmp(np.full((1, 2, 2), 3.25))[0] == 3.25

    def test_duplicate_max(self):
        assert pooling.gmp(np.array([[[0.0, 7.0], [7.0, 0.0]]]))[0] == 7.0

    def test_empty_extent_rejected(self):
        with pytest.raises(InvalidInputError):
            pooling.gmp(np.zeros((1, 2, 0)))


class TestLayerInvariants:
    def test_defaults_valid(self):
        layer = pooling.PPoolingLayer()
        assert layer.l_min <= layer.l <= layer.l_max
        assert layer.eps > 0

    def test_bad_eps_rejected(self):
        with pytest.raises(InvalidInputError):
            pooling.PPoolingLayer(eps=0.0)

    def test_l_min_below_one_rejected(self):
        with pytest.raises(InvalidInputError):
            pooling.PPoolingLayer(l_min=0.5)

    def test_clamp_after_update(self):
        layer = pooling.PPoolingLayer()
        layer.l = 99.0
        assert layer.clamp() == layer.l_max
        layer.l = -2.0
        assert layer.clamp() == layer.l_min


class TestForward:
    def test_hand_case_l2(self):
        layer = pooling.PPoolingLayer(l=2.0)
        assert pooling.ppool_forward(chan([1, 2, 3]), layer)[0] == pytest.approx(14 / 6, rel=1e-12)

    def test_l1_equals_gap_exactly(self):
        layer = pooling.PPoolingLayer(l=1.0)
        rng = np.random.default_rng(3)
        a = rng.uniform(0.0, 10.0, size=(4, 5, 6))
        floored = np.maximum(a, layer.eps)
        assert np.array_equal(pooling.ppool_forward(a, layer), pooling.gap(floored))

    def test_l16_approaches_max(self):
        layer = pooling.PPoolingLayer(l=16.0)
        value = pooling.ppool_forward(chan([1, 2, 3]), layer)[0]
        assert value <= 3.0
        assert abs(value - 3.0) < 0.05

    def test_negative_input_rejected(self):
        with pytest.raises(ContractViolationError):
            pooling.ppool_forward(chan([1.0, -0.1]), pooling.PPoolingLayer())


class TestGradL:
    def test_constant_channel_is_zero(self):
        layer = pooling.PPoolingLayer(l=2.5)
        assert pooling.ppool_grad_l(np.full((1, 2, 3), 4.0), layer)[0] == 0.0

    @pytest.mark.parametrize("values,l", [([1.0, 2.0, 3.0], 2.0), ([0.5, 4.0], 3.0)])
    def test_matches_finite_difference(self, values, l):
        a = chan(values)
        layer = pooling.PPoolingLayer(l=l)
        grad = pooling.ppool_grad_l(a, layer)[0]
        fd = oracles.oracle_fd(
            lambda x: pooling.ppool_forward(a, pooling.PPoolingLayer(l=float(x)))[0],
            l, step=1e-4,
        )
        assert abs(grad - float(fd)) / abs(float(fd)) < 1e-5


class TestGradInput:
    def test_l1_is_uniform_mean_gradient(self):
        layer = pooling.PPoolingLayer(l=1.0)
        rng = np.random.default_rng(1)
        a = rng.uniform(0.5, 5.0, size=(2, 3, 4))
        np.testing.assert_allclose(pooling.ppool_grad_input(a, layer), 1.0 / 12, rtol=1e-12)

    def test_matches_per_element_finite_difference(self):
        a = chan([1.0, 2.0, 3.0])
        layer = pooling.PPoolingLayer(l=2.0)
        grad = pooling.ppool_grad_input(a, layer)

        def fn(x):
            return pooling.ppool_forward(x.reshape(1, 1, -1), layer)[0]

        fd = oracles.oracle_fd(fn, a.reshape(-1)).reshape(a.shape)
        assert np.all(np.abs(grad - fd) / np.abs(fd) < 1e-5)

    def test_floored_entries_get_zero_gradient(self):
        layer = pooling.PPoolingLayer()
        a = chan([1e-9, 2.0, 3.0])
        grad = pooling.ppool_grad_input(a, layer).reshape(-1)
        assert grad[0] == 0.0
        assert np.all(grad[1:] != 0.0)


@st.composite
def maps_and_exponent(draw):
    n = draw(st.integers(min_value=2, max_value=12))
    values = draw(st.lists(st.floats(min_value=1e-6, max_value=10.0), min_size=n, max_size=n))
    l = draw(st.floats(min_value=1.0, max_value=8.0))
    return chan(values), pooling.PPoolingLayer(l=l)


class TestProperties:
    @given(maps_and_exponent())
    @settings(max_examples=200, deadline=None)
    def test_lehmer_sandwich(self, case):
        a, layer = case
        floored = np.maximum(a, layer.eps)
        value = pooling.ppool_forward(a, layer)[0]
        assert pooling.gap(floored)[0] <= value <= pooling.gmp(floored)[0]

    @given(maps_and_exponent())
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariance(self, case):
        a, layer = case
        perm = np.random.default_rng(0).permutation(a.size)
        shuffled = a.reshape(-1)[perm].reshape(a.shape)
        assert pooling.gap(shuffled)[0] == pytest.approx(pooling.gap(a)[0], rel=1e-12)
        assert pooling.gmp(shuffled)[0] == pooling.gmp(a)[0]
        assert pooling.ppool_forward(shuffled, layer)[0] == pytest.approx(
            pooling.ppool_forward(a, layer)[0], rel=1e-12)

    def test_monotone_in_exponent(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            a = rng.uniform(1e-6, 10.0, size=(1, 3, 4))
            values = [
                pooling.ppool_forward(a, pooling.PPoolingLayer(l=l))[0]
                for l in np.linspace(1.0, 12.0, 23)
            ]
            assert np.all(np.diff(values) >= -1e-12)

    def test_random_gradients_match_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            c, h, w = rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 5)
            a = rng.uniform(1e-6, 10.0, size=(int(c), int(h), int(w)))
            layer = pooling.PPoolingLayer(l=float(rng.uniform(1.0, 8.0)))

            fd_l = np.array([
                oracles.oracle_fd(
                    lambda x, k=k: pooling.ppool_forward(
                        a[k:k + 1], pooling.PPoolingLayer(l=float(x)))[0],
                    layer.l)
                for k in range(a.shape[0])
            ])
            assert oracles.fd_rel_error(pooling.ppool_grad_l(a, layer), fd_l) < 1e-5

            fd_in = np.zeros_like(a)
            for k in range(a.shape[0]):
                def fn(x, k=k):
                    b = a.copy()
                    b[k] = x
                    return pooling.ppool_forward(b[k:k + 1], layer)[0]
                fd_in[k] = oracles.oracle_fd(fn, a[k])
            assert oracles.fd_rel_error(pooling.ppool_grad_input(a, layer), fd_in) < 1e-5
