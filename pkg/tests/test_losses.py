import math

import numpy as np
import pytest
import torch

from esnet import oracles
from esnet.errors import InvalidInputError, SamplerContractError
from esnet.losses import LossBundle, TripletConfig, batch_hard_triplet, id_loss


class TestIdLoss:
    def test_uniform_logits_give_log_c(self):
        logits = torch.zeros(5, 7)
        labels = torch.tensor([0, 1, 2, 3, 4])
        assert float(id_loss(logits, labels)) == pytest.approx(math.log(7), rel=1e-6)

    def test_confident_correct_is_near_zero(self):
        logits = torch.full((3, 4), -50.0)
        labels = torch.tensor([1, 2, 0])
        logits[torch.arange(3), labels] = 50.0
        assert float(id_loss(logits, labels)) < 1e-6

    def test_two_class_tie(self):
        loss = id_loss(torch.zeros(1, 2), torch.tensor([0]))
        assert float(loss) == pytest.approx(math.log(2), rel=1e-6)

    def test_out_of_range_label(self):
        with pytest.raises(InvalidInputError):
            id_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def triplet(embeddings, labels, margin=0.3):
    return float(batch_hard_triplet(
        torch.as_tensor(np.asarray(embeddings), dtype=torch.float64),
        torch.as_tensor(labels), TripletConfig(margin)))


class TestBatchHardTriplet:
    def test_identical_embeddings_give_margin(self):
        assert triplet(np.ones((4, 3)), [0, 0, 1, 1]) == pytest.approx(0.3)

    def test_separated_clusters_give_zero(self):
        emb = [[0.0, 0.0], [0.1, 0.0], [9.0, 0.0], [9.1, 0.0]]
        assert triplet(emb, [0, 0, 1, 1]) == 0.0

    def test_four_point_hand_case(self):
        # Frozen via the exhaustive-enumeration oracle.
        emb = [[0.0, 0.0], [1.2, 0.0], [0.8, 0.0], [2.0, 0.5]]
        assert triplet(emb, [0, 0, 1, 1]) == pytest.approx(0.9141504716985849, abs=1e-12)

    def test_matches_enumeration_oracle_on_random_batches(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            j = int(rng.integers(2, 5))
            k = int(rng.integers(2, 5))
            emb = rng.normal(size=(j * k, 5))
            labels = np.repeat(np.arange(j), k)
            margin = float(rng.uniform(0.1, 1.0))
            assert triplet(emb, labels, margin) == pytest.approx(
                oracles.oracle_triplet(emb, labels, margin), rel=1e-9)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(8, 2))
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        theta = 1.1
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        moved = emb @ rot.T + np.array([5.0, -3.0])
        assert triplet(moved, labels) == pytest.approx(triplet(emb, labels), rel=1e-9)

    def test_singleton_label_rejected(self):
        with pytest.raises(SamplerContractError):
            triplet(np.ones((3, 2)), [0, 0, 1])

    def test_single_identity_rejected(self):
        with pytest.raises(SamplerContractError):
            triplet(np.ones((4, 2)), [2, 2, 2, 2])


class TestLossBundle:
    def test_total_is_component_sum(self):
        bundle = LossBundle(0.1, 0.2, 0.3, 0.4)
        assert bundle.total == 0.1 + 0.2 + 0.3 + 0.4
        row = bundle.as_row()
        assert row["L_total"] == bundle.total
        assert set(row) == {"L_total", "L_ESB_id", "L_ESB_triplet", "L_AIB_id", "L_AIB_triplet"}

    def test_margin_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            TripletConfig(margin=0.0)
