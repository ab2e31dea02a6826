"""Batch embedding of raw strings and pair records for evaluation paths."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import PairRecord, Vocab, tokenize
from .encoder import AdapterHooks, EncoderWeights, encode_batch
from .errors import DataError


def _reserved_positions(adapter: AdapterHooks | None) -> int:
    config = getattr(adapter, "config", None)
    return int(getattr(config, "m", 0)) if config is not None else 0


def embed_strings(
    weights: EncoderWeights,
    vocab: Vocab,
    strings: list[str],
    mode: str,
    adapter: AdapterHooks | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Unit-norm embeddings, one row per input string (no gradient graph).

    Inputs longer than the encoder window (minus any prompt reserve) are
    truncated deterministically.
    """
    limit = weights.config.max_len - _reserved_positions(adapter)
    sequences = []
    for i, s in enumerate(strings):
        ids = vocab.encode(tokenize(s, mode))[:limit]
        if not ids:
            raise DataError(f"input {i} produced no tokens")
        sequences.append(ids)
    rows = np.zeros((len(sequences), weights.config.d_emb))
    with ad.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            width = max(len(s) for s in chunk)
            ids = np.zeros((len(chunk), width), dtype=np.int64)
            mask = np.zeros((len(chunk), width))
            for i, s in enumerate(chunk):
                ids[i, : len(s)] = s
                mask[i, : len(s)] = 1.0
            rows[start : start + len(chunk)] = encode_batch(weights, ids, mask, adapter).data
    return rows


def embed_pairs(
    weights: EncoderWeights,
    vocab: Vocab,
    records: list[PairRecord],
    adapter: AdapterHooks | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Embed both sides of a record list through the shared tower -> (Hc, Ht)."""
    hc = embed_strings(weights, vocab, [r.code for r in records], "code", adapter, batch_size)
    ht = embed_strings(weights, vocab, [r.text for r in records], "text", adapter, batch_size)
    return hc, ht
