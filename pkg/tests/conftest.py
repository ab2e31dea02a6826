from __future__ import annotations

import numpy as np
import pytest

from peftsearch.encoder import EncoderConfig, init_encoder


@pytest.fixture
def tiny_config():
    """Smallest geometry that still exercises heads and the FFN."""
    return EncoderConfig(layers=1, d_model=8, heads=2, d_ff=16, vocab_size=11, max_len=12, d_emb=4)


@pytest.fixture
def tiny_encoder(tiny_config):
    return init_encoder(tiny_config, seed=0)


@pytest.fixture
def desk_config():
    return EncoderConfig.desk(vocab_size=64, max_len=16)


def random_batch(rng: np.random.Generator, n: int, t: int, vocab: int):
    """ids/mask pair with at least one real token per row (PAD id 0 excluded)."""
    lengths = rng.integers(1, t + 1, size=n)
    ids = np.zeros((n, t), dtype=np.int64)
    mask = np.zeros((n, t))
    for i, ln in enumerate(lengths):
        ids[i, :ln] = rng.integers(4, vocab, size=ln)
        mask[i, :ln] = 1.0
    return ids, mask
