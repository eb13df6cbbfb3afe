import math

import numpy as np
import pytest

from esnet import oracles


class TestFiniteDifference:
    def test_square_at_three(self):
        grad = oracles.oracle_fd(lambda x: float(x) ** 2, 3.0, step=1e-4)
        assert abs(float(grad) - 6.0) < 1e-6

    def test_vector_point(self):
        point = np.array([1.0, 2.0, -3.0])
        grad = oracles.oracle_fd(lambda x: float((x ** 2).sum()), point)
        np.testing.assert_allclose(grad, 2 * point, atol=1e-6)

    def test_rel_error_metric(self):
        assert oracles.fd_rel_error([0.0, 0.0], [0.0, 0.0]) == 0.0
        assert oracles.fd_rel_error([1.0, 0.0], [1.0, 0.0]) == 0.0
        assert oracles.fd_rel_error([1.0], [2.0]) == pytest.approx(0.5)


class TestTripletOracle:
    def test_collinear_hand_case(self):
        # Anchors at 0 and 1 share a label; 3 is the lone... two per label:
        # points 0, 1 (label 0) and 3, 5 (label 1), margin 0.2.
        emb = np.array([[0.0], [1.0], [3.0], [5.0]])
        lab = [0, 0, 1, 1]
        # per anchor: 0: 0.2+1-3<0; 1: 0.2+1-2<0; 3: 0.2+2-2=0.2; 5: 0.2+2-4<0
        assert oracles.oracle_triplet(emb, lab, 0.2) == pytest.approx(0.2 / 4)

    def test_identical_embeddings_give_margin(self):
        emb = np.ones((6, 3))
        lab = [0, 0, 0, 1, 1, 1]
        assert oracles.oracle_triplet(emb, lab, 0.3) == pytest.approx(0.3)

    def test_separated_clusters_give_zero(self):
        emb = np.array([[0.0, 0], [0.1, 0], [10.0, 0], [10.1, 0]])
        lab = [0, 0, 1, 1]
        assert oracles.oracle_triplet(emb, lab, 0.3) == 0.0


class TestApOracle:
    def test_single_positive_at_rank_one(self):
        assert oracles.oracle_ap(["a", "b", "c"], {"a"}) == 1.0

    def test_positives_at_ranks_one_and_three(self):
        assert oracles.oracle_ap(["a", "b", "c", "d"], {"a", "c"}) == pytest.approx(5 / 6)

    def test_no_positives_is_flagged(self):
        with pytest.raises(ValueError):
            oracles.oracle_ap(["a", "b"], set())


class TestTopPositions:
    def test_row_major_tie_break(self):
        values = [[1.0, 2.0], [2.0, 0.0]]
        assert oracles.oracle_top_positions(values, 2) == [(0, 1), (1, 0)]

    def test_all_equal_takes_leading_positions(self):
        values = np.zeros((2, 3))
        assert oracles.oracle_top_positions(values, 3) == [(0, 0), (0, 1), (0, 2)]


class TestCmcMapOracle:
    def test_tiny_instance(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[1.0, 0.1], [0.0, 1.0], [1.0, 0.0]])
        cmc, mean_ap, aps, dropped = oracles.oracle_cmc_map(
            q, [5], [1], g, [5, 6, 5], [2, 1, 1], rank_max=3)
        # gallery index 2 is same pid + same cam -> excluded; index 0 ranks first
        assert dropped == 0
        assert aps == [1.0]
        assert cmc[0] == 1.0
        assert mean_ap == 1.0
