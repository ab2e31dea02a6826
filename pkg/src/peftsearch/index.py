"""Code-embedding database: exact top-k text-to-code search plus context
export for an external generator.

The index embeds the code side of a pair corpus with one checkpoint and is
fingerprint-tied to it; queries must be embedded by the same checkpoint.
The on-disk layout is a JSON header line, the raw float32 little-endian
row-major embedding matrix, and a JSON metadata block.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_pairs_with_offsets, tokenize
from .embedding import embed_strings
from .errors import DataError, RetrievalIndexError
from .training import CheckpointBundle

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


@dataclass
class IndexMeta:
    lang: str
    source: str
    start: int
    end: int


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray  # (M, d_emb) float32, unit-norm rows
    meta: dict[str, IndexMeta]
    fingerprint: str

    @property
    def m(self) -> int:
        return len(self.ids)

    @property
    def d_emb(self) -> int:
        return int(self.matrix.shape[1])


@dataclass
class SearchHit:
    id: str
    score: float


@dataclass
class QueryResult:
    hits: list[SearchHit]
    k: int


def build_index(bundle: CheckpointBundle, corpus_path) -> EmbeddingIndex:
    """Embed the code side of every record in the corpus file."""
    corpus_path = Path(corpus_path)
    rows = read_pairs_with_offsets(corpus_path)
    if not rows:
        raise DataError(f"corpus {corpus_path} holds no records")
    records = [r for r, _, _ in rows]
    vocab = _bundle_vocab(bundle)
    emb = embed_strings(bundle.weights, vocab, [r.code for r in records], "code", bundle.adapter)
    matrix = emb.astype("<f4")
    meta = {
        rec.id: IndexMeta(lang=rec.lang, source=str(corpus_path), start=start, end=end)
        for rec, start, end in rows
    }
    return EmbeddingIndex(
        ids=[r.id for r in records],
        matrix=matrix,
        meta=meta,
        fingerprint=bundle.fingerprint,
    )


def _bundle_vocab(bundle: CheckpointBundle):
    vocab = getattr(bundle, "vocab", None)
    if vocab is None:
        raise RetrievalIndexError("checkpoint bundle has no vocabulary attached")
    return vocab


def save_index(index: EmbeddingIndex, path) -> None:
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "fingerprint": index.fingerprint,
        "m": index.m,
        "d_emb": index.d_emb,
    }
    metadata = {
        "ids": index.ids,
        "meta": {
            rid: {"lang": m.lang, "source": m.source, "start": m.start, "end": m.end}
            for rid, m in index.meta.items()
        },
    }
    blob = (
        json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        + b"\n"
        + np.ascontiguousarray(index.matrix, dtype="<f4").tobytes()
        + json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    )
    Path(path).write_bytes(blob)


def load_index(path) -> EmbeddingIndex:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise RetrievalIndexError(f"cannot read index {path}: {exc}") from exc
    newline = blob.find(b"\n")
    if newline < 0:
        raise RetrievalIndexError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RetrievalIndexError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != INDEX_FORMAT_VERSION:
        raise RetrievalIndexError(f"{path}: unsupported index version")
    m, d = int(header["m"]), int(header["d_emb"])
    body = blob[newline + 1 :]
    nbytes = m * d * 4
    if len(body) < nbytes:
        raise RetrievalIndexError(f"{path}: truncated embedding matrix")
    matrix = np.frombuffer(body[:nbytes], dtype="<f4").reshape(m, d)
    try:
        metadata = json.loads(body[nbytes:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RetrievalIndexError(f"{path}: corrupt metadata block: {exc}") from exc
    meta = {
        rid: IndexMeta(lang=v["lang"], source=v["source"], start=int(v["start"]), end=int(v["end"]))
        for rid, v in metadata["meta"].items()
    }
    return EmbeddingIndex(
        ids=list(metadata["ids"]),
        matrix=matrix.copy(),
        meta=meta,
        fingerprint=header["fingerprint"],
    )


def search(bundle: CheckpointBundle, index: EmbeddingIndex, query: str, k: int) -> QueryResult:
    """Exact cosine top-k by full scan; ties break on ascending id."""
    if index.m == 0:
        raise RetrievalIndexError("cannot search an empty index")
    if k < 1:
        raise RetrievalIndexError(f"k must be >= 1, got {k}")
    if bundle.fingerprint != index.fingerprint:
        raise RetrievalIndexError(
            "index fingerprint does not match the supplied checkpoint"
        )
    if k > index.m:
        log.warning("search: k=%d exceeds index size %d; returning all entries", k, index.m)
        k = index.m
    vocab = _bundle_vocab(bundle)
    q = embed_strings(bundle.weights, vocab, [query], "text", bundle.adapter)[0]
    scores = index.matrix.astype(np.float64) @ q
    order = sorted(range(index.m), key=lambda i: (-scores[i], index.ids[i]))
    hits = [SearchHit(id=index.ids[i], score=float(scores[i])) for i in order[:k]]
    return QueryResult(hits=hits, k=k)


def _snippet_code(index: EmbeddingIndex, rid: str) -> tuple[str, str]:
    meta = index.meta[rid]
    source = Path(meta.source)
    try:
        with open(source, "rb") as fh:
            fh.seek(meta.start)
            raw = fh.read(meta.end - meta.start)
    except OSError as exc:
        raise DataError(f"cannot read corpus {source} behind the index: {exc}") from exc
    record = json.loads(raw.decode("utf-8"))
    return record["code"], meta.lang


def export_context(
    index: EmbeddingIndex,
    result: QueryResult,
    budget_tokens: int,
) -> str:
    """Concatenate retrieved snippets in rank order under a token budget.

    Each snippet is prefixed by a ``### <id> (<lang>)`` header line.  A
    snippet that would overflow the budget is token-truncated (and a
    diagnostic logged); later snippets are dropped.
    """
    if budget_tokens < 1:
        raise DataError("context budget must be at least one token")
    blocks: list[str] = []
    used = 0
    for rank, hit in enumerate(result.hits):
        code, lang = _snippet_code(index, hit.id)
        toks = tokenize(code, "code")
        remaining = budget_tokens - used
        if remaining <= 0:
            break
        if len(toks) > remaining:
            code = " ".join(toks[:remaining])
            log.warning(
                "export_context: snippet %s truncated from %d to %d tokens",
                hit.id, len(toks), remaining,
            )
            used = budget_tokens
        else:
            used += len(toks)
        blocks.append(f"### {hit.id} ({lang})\n{code}\n")
        if used >= budget_tokens:
            break
    return "".join(blocks)
