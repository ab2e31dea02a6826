"""Retrieval and generation metrics: two MRR protocols, ROUGE, and the
trainable-parameter audit table.

Queries are natural-language texts and candidates are code snippets, so
similarity rows are laid out query-major (S[i, j] = ht_i . hc_j).  Ranks use
optimistic tie-breaking: an exact tie with the matching candidate never
worsens the rank.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .adapters import count_trainable, build_adapter
from .encoder import EncoderConfig
from .errors import DataError

log = logging.getLogger(__name__)

BASE_MODEL_PARAMS = 110_000_000


@dataclass
class MrrReport:
    protocol: str  # "all-pairs" or "chunked"
    cutoff: int | None
    chunk_size: int | None
    ranks: list[int]
    mrr: float
    n_evaluated: int

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "cutoff": self.cutoff,
            "chunk_size": self.chunk_size,
            "n_evaluated": self.n_evaluated,
            "mrr": self.mrr,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def summary(self) -> str:
        scope = f"cutoff={self.cutoff}" if self.protocol == "all-pairs" else f"chunk_size={self.chunk_size}"
        return f"{self.protocol} ({scope}): mrr={self.mrr:.5f} over {self.n_evaluated} queries"


def rank_of_match(i: int, scores: np.ndarray) -> int:
    """1 + number of candidates scoring strictly above the match in row i."""
    row = scores[i]
    return 1 + int(np.sum(row > row[i]))


def rank_of_match_oracle(i: int, scores: np.ndarray) -> int:
    """Brute-force rank via a full sort of the score row (ties optimistic)."""
    row = scores[i]
    order = np.argsort(-row, kind="stable")
    positions = np.where(row[order] == row[i])[0]
    return int(positions[0]) + 1


def _query_scores(hc: np.ndarray, ht: np.ndarray) -> np.ndarray:
    hc = np.asarray(hc, dtype=np.float64)
    ht = np.asarray(ht, dtype=np.float64)
    if hc.shape != ht.shape or hc.ndim != 2:
        raise DataError(f"embedding sets must be equal-shape 2-D, got {hc.shape} and {ht.shape}")
    return ht @ hc.T


def mrr_all_pairs(
    hc: np.ndarray,
    ht: np.ndarray,
    cutoff: int = 1000,
    drop_over_cutoff: bool = False,
) -> MrrReport:
    """MRR over the full pairwise similarity matrix.

    Ranks above the cutoff contribute 0 by default; with
    ``drop_over_cutoff`` they are removed from the denominator instead.
    """
    if len(hc) == 0:
        raise DataError("cannot evaluate MRR over an empty embedding set")
    scores = _query_scores(hc, ht)
    n = scores.shape[0]
    ranks = [rank_of_match(i, scores) for i in range(n)]
    reciprocal = [1.0 / r for r in ranks if r <= cutoff]
    denominator = len(reciprocal) if drop_over_cutoff else n
    mrr = (sum(reciprocal) / denominator) if denominator else 0.0
    return MrrReport(
        protocol="all-pairs",
        cutoff=cutoff,
        chunk_size=None,
        ranks=ranks,
        mrr=mrr,
        n_evaluated=denominator if drop_over_cutoff else n,
    )


def mrr_chunked(hc: np.ndarray, ht: np.ndarray, chunk: int = 1000) -> MrrReport:
    """Average of plain per-chunk MRRs in dataset order.

    The pool is partitioned into consecutive chunks of ``chunk`` pairs;
    a smaller trailing chunk is discarded.
    """
    hc = np.asarray(hc, dtype=np.float64)
    ht = np.asarray(ht, dtype=np.float64)
    n = len(hc)
    if n < chunk:
        raise DataError(
            f"chunked protocol needs at least chunk_size={chunk} pairs, got {n}"
        )
    n_chunks = n // chunk
    ranks: list[int] = []
    chunk_mrrs = []
    for c in range(n_chunks):
        lo, hi = c * chunk, (c + 1) * chunk
        scores = _query_scores(hc[lo:hi], ht[lo:hi])
        chunk_ranks = [rank_of_match(i, scores) for i in range(chunk)]
        ranks.extend(chunk_ranks)
        chunk_mrrs.append(sum(1.0 / r for r in chunk_ranks) / chunk)
    return MrrReport(
        protocol="chunked",
        cutoff=None,
        chunk_size=chunk,
        ranks=ranks,
        mrr=sum(chunk_mrrs) / n_chunks,
        n_evaluated=n_chunks * chunk,
    )


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float


@dataclass
class RougeReport:
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore

    def to_json(self) -> str:
        payload = {
            name: {"precision": s.precision, "recall": s.recall, "f1": s.f1}
            for name, s in (("rouge1", self.rouge1), ("rouge2", self.rouge2), ("rougeL", self.rougeL))
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _ngram_counts(tokens: list[str], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge(candidate: list[str], reference: list[str], variant) -> RougeScore:
    """ROUGE-1/2 via clipped n-gram overlap, ROUGE-L via LCS length."""
    if not candidate and not reference:
        log.warning("rouge: both sequences empty; scoring zeros")
        return RougeScore(0.0, 0.0, 0.0)
    if variant in (1, 2):
        n = int(variant)
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        overlap = sum(min(c, ref.get(g, 0)) for g, c in cand.items())
        total_cand = max(len(candidate) - n + 1, 0)
        total_ref = max(len(reference) - n + 1, 0)
        p = overlap / total_cand if total_cand else 0.0
        r = overlap / total_ref if total_ref else 0.0
    elif variant in ("L", "l"):
        lcs = _lcs_length(candidate, reference)
        p = lcs / len(candidate) if candidate else 0.0
        r = lcs / len(reference) if reference else 0.0
    else:
        raise ValueError(f"unknown ROUGE variant {variant!r}")
    return RougeScore(p, r, _f1(p, r))


def rouge_report(candidate: list[str], reference: list[str]) -> RougeReport:
    return RougeReport(
        rouge1=rouge(candidate, reference, 1),
        rouge2=rouge(candidate, reference, 2),
        rougeL=rouge(candidate, reference, "L"),
    )


def rouge_corpus(candidates: list[list[str]], references: list[list[str]]) -> RougeReport:
    """Macro-average of per-pair ROUGE scores."""
    if len(candidates) != len(references):
        raise DataError("candidate and reference files must have equal line counts")
    if not candidates:
        raise DataError("cannot score an empty candidate set")
    reports = [rouge_report(c, r) for c, r in zip(candidates, references)]

    def avg(getter):
        scores = [getter(rep) for rep in reports]
        return RougeScore(
            precision=sum(s.precision for s in scores) / len(scores),
            recall=sum(s.recall for s in scores) / len(scores),
            f1=sum(s.f1 for s in scores) / len(scores),
        )

    return RougeReport(
        rouge1=avg(lambda r: r.rouge1),
        rouge2=avg(lambda r: r.rouge2),
        rougeL=avg(lambda r: r.rougeL),
    )


def audit_report(encoder_config: EncoderConfig, adapter_configs: dict[str, object]) -> str:
    """Aligned table of trainable counts and % of the 110M base per method.

    Counts come from enumerating the actual adapter tensors and are
    cross-checked against the closed forms.
    """
    lines = [f"{'method':<10}{'tunable #':>12}  {'tunable %':>9}"]
    for method, config in adapter_configs.items():
        adapter = build_adapter(method, config, encoder_config, seed=0)
        enumerated = adapter.num_params()
        formula = count_trainable(method, config, encoder_config)
        if enumerated != formula:
            raise AssertionError(
                f"{method}: enumerated {enumerated} != closed form {formula}"
            )
        pct = 100.0 * enumerated / BASE_MODEL_PARAMS
        lines.append(f"{method:<10}{enumerated:>12,}  {pct:>9.3f}")
    return "\n".join(lines)
