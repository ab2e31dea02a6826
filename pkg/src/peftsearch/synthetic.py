"""Seeded synthetic pair corpora for desk-scale experiments.

Each pair carries a distinctive two-token signature that appears verbatim
on both the text and code sides, embedded among shared filler tokens.  A
retriever therefore has to learn to up-weight the rare signature tokens
against the filler background; a random encoder sees only a weak signal.
"""

from __future__ import annotations

import numpy as np

from .data import PairRecord

SIGNATURE_POOL = 80
TEXT_FILLERS = [f"w{i:02d}" for i in range(60)]
CODE_FILLERS = [f"c{i:02d}" for i in range(48)]
CODE_FRAME = ["def", "(", ")", ":", "return", "+", "=", ";"]


def make_synthetic_corpus(
    n_pairs: int = 512,
    seed: int = 0,
    lang: str = "py",
    text_fillers: int = 6,
    code_fillers: int = 5,
) -> list[PairRecord]:
    """Generate ``n_pairs`` records with unique signature-token pairs.

    The token inventory is roughly 200 distinct tokens: 80 signature
    tokens, 60 text fillers, 48 code fillers, and a handful of code
    punctuation tokens.
    """
    rng = np.random.default_rng(seed)
    signatures: set[tuple[int, int]] = set()
    records = []
    sig_tokens = [f"sig{i:02d}" for i in range(SIGNATURE_POOL)]
    while len(records) < n_pairs:
        pair = tuple(sorted(rng.choice(SIGNATURE_POOL, size=2, replace=False)))
        if pair in signatures:
            continue
        signatures.add(pair)
        s1, s2 = sig_tokens[pair[0]], sig_tokens[pair[1]]

        words = [TEXT_FILLERS[i] for i in rng.choice(len(TEXT_FILLERS), size=text_fillers)]
        text_toks = words + [s1, s2]
        text_toks = [text_toks[i] for i in rng.permutation(len(text_toks))]

        cf = [CODE_FILLERS[i] for i in rng.choice(len(CODE_FILLERS), size=code_fillers)]
        code_toks = ["def", cf[0], "(", cf[1], ")", ":",
                     cf[2], "=", cf[3], "+", cf[4], ";",
                     "return", s1, "+", s2]

        i = len(records)
        records.append(PairRecord(
            id=f"syn{i:04d}",
            text=" ".join(text_toks),
            code=" ".join(code_toks),
            lang=lang,
        ))
    return records
