"""Dataset ingestion: tokenize, filter, split, and batch text/code pairs.

Pairs live in UTF-8 JSON Lines files with keys exactly ``id``, ``text``,
``code``, ``lang``.  The tokenizer splits on whitespace and punctuation
boundaries (punctuation characters become their own tokens); text mode
lowercases, code mode preserves case.  Filtering drops pairs that are too
short on either side or whose text looks non-English, and truncates
over-long sides so that a second pass is a no-op.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class PairRecord:
    """One natural-language/code training pair."""

    id: str
    text: str
    code: str
    lang: str


def tokenize(s: str, mode: str = "text") -> list[str]:
    """Split into word and single-punctuation tokens; text mode lowercases."""
    if mode not in ("text", "code"):
        raise ConfigError(f"unknown tokenize mode {mode!r}")
    if mode == "text":
        s = s.lower()
    return _TOKEN_RE.findall(s)


class Vocab:
    """Frequency-ranked token table with fixed reserved ids.

    Ids are dense in [0, size); PAD=0, UNK=1, BOS=2, EOS=3 are never
    reassigned.
    """

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(RESERVED_TOKENS) + list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def size(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def non_reserved_tokens(self) -> list[str]:
        return self._tokens[len(RESERVED_TOKENS) :]

    def to_json(self) -> str:
        payload = {"version": 1, "reserved": list(RESERVED_TOKENS), "tokens": self.non_reserved_tokens()}
        return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        payload = json.loads(text)
        if payload.get("version") != 1 or list(payload.get("reserved", [])) != list(RESERVED_TOKENS):
            raise DataError("unsupported vocabulary file")
        return cls(payload["tokens"])


def build_vocab(records: Iterable[PairRecord], max_size: int, min_freq: int = 1) -> Vocab:
    """Frequency-then-lexicographic vocabulary over both sides of the corpus."""
    if max_size < 5:
        raise ConfigError("max_size must be at least 5 (4 reserved ids + 1 token)")
    counts: dict[str, int] = {}
    n_records = 0
    for rec in records:
        n_records += 1
        for tok in tokenize(rec.text, "text"):
            counts[tok] = counts.get(tok, 0) + 1
        for tok in tokenize(rec.code, "code"):
            counts[tok] = counts.get(tok, 0) + 1
    if n_records == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(ranked[: max_size - len(RESERVED_TOKENS)])


@dataclass
class FilterReport:
    """Per-rule drop and truncation counts from one filtering pass."""

    too_short: int = 0
    non_english: int = 0
    truncated_text: int = 0
    truncated_code: int = 0
    kept: int = 0

    def summary(self) -> str:
        lines = [
            f"too_short: {self.too_short}",
            f"non_english: {self.non_english}",
            f"truncated_text: {self.truncated_text}",
            f"truncated_code: {self.truncated_code}",
            f"kept: {self.kept}",
        ]
        return "\n".join(lines)


def _looks_english(text: str) -> bool:
    # >= 90% of alphabetic characters must be ASCII letters; no alphabetic
    # characters at all passes vacuously.
    alpha = [ch for ch in text if ch.isalpha()]
    if not alpha:
        return True
    ascii_letters = sum(1 for ch in alpha if "a" <= ch.lower() <= "z")
    return ascii_letters / len(alpha) >= 0.9


def filter_pairs(
    records: Iterable[PairRecord],
    min_tokens: int = 3,
    max_text: int = 256,
    max_code: int = 256,
) -> tuple[list[PairRecord], FilterReport]:
    """Apply the length and language rules; returns survivors plus counts.

    Over-long sides are truncated (tokens rejoined with single spaces), so
    running the filter twice leaves its output unchanged.
    """
    report = FilterReport()
    kept: list[PairRecord] = []
    for rec in records:
        text_toks = tokenize(rec.text, "text")
        code_toks = tokenize(rec.code, "code")
        text, code = rec.text, rec.code
        if len(text_toks) > max_text:
            text_toks = text_toks[:max_text]
            text = " ".join(text_toks)
            report.truncated_text += 1
        if len(code_toks) > max_code:
            code_toks = code_toks[:max_code]
            code = " ".join(code_toks)
            report.truncated_code += 1
        if len(text_toks) < min_tokens or len(code_toks) < min_tokens:
            report.too_short += 1
            continue
        if not _looks_english(text):
            report.non_english += 1
            continue
        kept.append(PairRecord(id=rec.id, text=text, code=code, lang=rec.lang))
        report.kept += 1
    return kept, report


def split_dataset(
    records: Sequence[PairRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, list[PairRecord]]:
    """Deterministic shuffled split into train/valid/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    n = len(records)
    n_splits = sum(1 for r in ratios if r > 0)
    if n < n_splits:
        raise DataError(f"{n} records cannot fill {n_splits} splits")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [records[i] for i in order]
    n_train = int(n * ratios[0])
    n_valid = int(n * ratios[1])
    return {
        "train": shuffled[:n_train],
        "valid": shuffled[n_train : n_train + n_valid],
        "test": shuffled[n_train + n_valid :],
    }


@dataclass
class Batch:
    """Padded id matrices and binary pad masks for one mini-batch."""

    text_ids: np.ndarray
    code_ids: np.ndarray
    text_mask: np.ndarray
    code_mask: np.ndarray
    ids: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.text_ids.shape[0]


def _pad_block(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def encode_pairs(records: Sequence[PairRecord], vocab: Vocab) -> list[tuple[list[int], list[int]]]:
    return [
        (vocab.encode(tokenize(r.text, "text")), vocab.encode(tokenize(r.code, "code")))
        for r in records
    ]


def make_batches(
    records: Sequence[PairRecord],
    vocab: Vocab,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    drop_last: bool = True,
    max_text: int | None = None,
    max_code: int | None = None,
) -> Iterator[Batch]:
    """Shuffled, per-batch-padded mini-batches; reshuffles per seed+epoch.

    ``max_text``/``max_code`` clamp sequences to the encoder window.
    """
    if batch_size < 2:
        raise ConfigError("training batches need at least 2 pairs for in-batch negatives")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    encoded = encode_pairs(records, vocab)
    if max_text is not None or max_code is not None:
        encoded = [
            (t[:max_text] if max_text else t, c[:max_code] if max_code else c)
            for t, c in encoded
        ]
    for start in range(0, len(records), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) < batch_size and drop_last:
            return
        if len(chunk) < 2:
            return
        text_ids, text_mask = _pad_block([encoded[i][0] for i in chunk])
        code_ids, code_mask = _pad_block([encoded[i][1] for i in chunk])
        yield Batch(
            text_ids=text_ids,
            code_ids=code_ids,
            text_mask=text_mask,
            code_mask=code_mask,
            ids=[records[i].id for i in chunk],
        )


def record_to_json(rec: PairRecord) -> str:
    return json.dumps(
        {"id": rec.id, "text": rec.text, "code": rec.code, "lang": rec.lang},
        ensure_ascii=False,
        separators=(",", ":"),
    )


def read_pairs(path) -> list[PairRecord]:
    """Load a JSONL pair file; malformed lines or duplicate ids are data errors."""
    records = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = PairRecord(id=str(obj["id"]), text=obj["text"], code=obj["code"], lang=obj["lang"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed pair record: {exc}") from exc
            if rec.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def read_pairs_with_offsets(path) -> list[tuple[PairRecord, int, int]]:
    """Like read_pairs but also reports each record's byte span in the file."""
    out = []
    seen: set[str] = set()
    with open(path, "rb") as fh:
        offset = 0
        for lineno, raw in enumerate(fh, 1):
            start, end = offset, offset + len(raw)
            offset = end
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = PairRecord(id=str(obj["id"]), text=obj["text"], code=obj["code"], lang=obj["lang"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed pair record: {exc}") from exc
            if rec.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            out.append((rec, start, end))
    return out


def write_pairs(path, records: Iterable[PairRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")
