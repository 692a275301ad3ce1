import numpy as np
import pytest

from textvisual.textenc import EncoderConfig, WordVectorTable, init_params


def tiny_table(rng: np.random.Generator, vocab_size: int = 8, dim: int = 5, dtype=np.float64):
    words = [f"w{i}" for i in range(vocab_size)]
    matrix = rng.normal(0.0, 0.5, (vocab_size, dim)).astype(dtype)
    return WordVectorTable(dim=dim, vocab={w: i for i, w in enumerate(words)}, matrix=matrix)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_setup(rng):
    """Small float64 encoder (2 layers) plus its word table, dropout off."""
    table = tiny_table(rng)
    cfg = EncoderConfig(
        word_dim=5, hidden_size=4, num_layers=2, dropout_rate=0.0, max_seq_len=4, output_dim=6
    )
    params = init_params(cfg, table, rng, dtype=np.float64)
    return table, cfg, params
