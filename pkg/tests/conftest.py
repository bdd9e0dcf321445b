import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reform import Model, ModelConfig


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2,
                       head_dim=8, d_ff=48, vocab_size=512, max_positions=4096)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return Model.random(tiny_config, seed=7)
