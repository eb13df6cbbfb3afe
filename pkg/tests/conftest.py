import numpy as np
import pytest
import torch

from esnet.model import BackboneConfig, HeadConfig, build_model

# Deterministic single-threaded math keeps run-to-run comparisons honest.
torch.set_num_threads(1)


TINY_BACKBONE = BackboneConfig(
    stage_channels=(8, 12, 16, 24),
    stem_stages=2,
    input_size=(32, 16),
    last_stage_stride=1,
)


def tiny_model(num_identities: int = 6, seed: int = 0,
               esb_pooling: str = "ppool", embedding_dim: int = 16):
    aib = HeadConfig(pooling="gap", embedding_dim=embedding_dim)
    esb = HeadConfig(pooling=esb_pooling, embedding_dim=embedding_dim)
    return build_model(TINY_BACKBONE, aib, esb, num_identities, seed=seed)


def random_images(n: int, rng: np.random.Generator, size=(32, 16)) -> torch.Tensor:
    return torch.from_numpy(
        rng.normal(0.0, 1.0, size=(n, 3, *size)).astype(np.float32)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def snapshot_state(model) -> dict:
    """Clone every parameter and buffer for bit-identity comparisons."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def states_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)
