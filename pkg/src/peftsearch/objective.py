"""Bimodal temperature-scaled contrastive loss with a brute-force oracle.

Given N matched code/text embedding pairs, every non-matching cross-modal
pair inside the batch acts as a negative.  The loss averages the
code-anchored and text-anchored directions, so it is symmetric under
swapping the two modalities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class SimilarityMatrix:
    """Pairwise scaled similarities S[i, j] = (hc_i . ht_j) / tau."""

    scores: Tensor
    tau: float

    @property
    def n(self) -> int:
        return self.scores.shape[0]


def similarity_matrix(hc: Tensor, ht: Tensor, tau: float = 0.08) -> SimilarityMatrix:
    """Scaled dot-product similarities between unit-norm embedding rows."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if hc.shape != ht.shape or len(hc.shape) != 2:
        raise ShapeError(f"embedding sets must be equal-shape 2-D, got {hc.shape} and {ht.shape}")
    scores = ad.scale(ad.matmul(hc, ad.transpose_last2(ht)), 1.0 / tau)
    return SimilarityMatrix(scores=scores, tau=tau)


def nt_xent(sim: SimilarityMatrix | Tensor) -> Tensor:
    """Symmetric cross-entropy over in-batch negatives.

    Row i must match column i; the loss is the mean over both anchoring
    directions of -log softmax at the matching entry.  Gradients flow back
    to the embeddings through the similarity scores.
    """
    s = sim.scores if isinstance(sim, SimilarityMatrix) else sim
    if len(s.shape) != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    code_to_text = ad.diag_part(ad.log_softmax(s, axis=-1)).sum()
    text_to_code = ad.diag_part(ad.log_softmax(ad.transpose_last2(s), axis=-1)).sum()
    return ad.scale(ad.add(code_to_text, text_to_code), -1.0 / (2 * n))


def brute_force_loss(hc: np.ndarray, ht: np.ndarray, tau: float = 0.08) -> float:
    """Reference evaluation with explicit per-pair loops (no matrix ops)."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    hc = np.asarray(hc, dtype=np.float64)
    ht = np.asarray(ht, dtype=np.float64)
    n, width = hc.shape
    total = 0.0
    for i in range(n):
        for anchor_code in (True, False):
            logits = []
            for k in range(n):
                a = hc[i] if anchor_code else ht[i]
                b = ht[k] if anchor_code else hc[k]
                dot = 0.0
                for j in range(width):
                    dot += a[j] * b[j]
                logits.append(dot / tau)
            m = max(logits)
            denom = 0.0
            for val in logits:
                denom += math.exp(val - m)
            total += -(logits[i] - m - math.log(denom))
    return total / (2 * n)
