from __future__ import annotations

import numpy as np
import pytest

from peftsearch import data
from peftsearch.data import PairRecord
from peftsearch.errors import ConfigError, DataError


def _rec(i, text, code, lang="py"):
    return PairRecord(id=f"r{i}", text=text, code=code, lang=lang)


def test_tokenize_text_mode():
    assert data.tokenize("Hello, world") == ["hello", ",", "world"]


def test_tokenize_code_mode():
    assert data.tokenize("x=1", "code") == ["x", "=", "1"]
    assert data.tokenize("My_Func(a)", "code") == ["My_Func", "(", "a", ")"]


def test_tokenize_empty():
    assert data.tokenize("") == []


def test_tokenize_rejoin_stable():
    for s in ["def f(x): return x+1", "Compute the sum, fast!", "a||b&&c"]:
        toks = data.tokenize(s, "code")
        assert len(data.tokenize(" ".join(toks), "code")) == len(toks)


def test_build_vocab_frequency_order():
    vocab = data.build_vocab([_rec(0, "a a b", "a a b")], max_size=10)
    assert vocab.id_of("a") < vocab.id_of("b")
    assert vocab.id_of("a") >= 4  # reserved ids untouched


def test_build_vocab_min_freq_excludes():
    vocab = data.build_vocab([_rec(0, "a a b", "a a b")], max_size=10, min_freq=3)
    assert vocab.id_of("a") != data.UNK_ID
    assert vocab.id_of("b") == data.UNK_ID


def test_build_vocab_deterministic():
    recs = [_rec(i, f"tok{i} common words here", f"x{i} = {i}") for i in range(20)]
    v1 = data.build_vocab(recs, max_size=30)
    v2 = data.build_vocab(recs, max_size=30)
    assert v1.to_json() == v2.to_json()


def test_build_vocab_empty_corpus():
    with pytest.raises(DataError):
        data.build_vocab([], max_size=10)


def test_build_vocab_max_size_floor():
    with pytest.raises(ConfigError):
        data.build_vocab([_rec(0, "a b c", "d e f")], max_size=4)


def test_vocab_reserved_ids():
    vocab = data.Vocab(["x"])
    assert vocab.id_of("<pad>") == data.PAD_ID
    assert vocab.id_of("<unk>") == data.UNK_ID
    assert vocab.encode(["missing"]) == [data.UNK_ID]


def test_vocab_json_round_trip():
    vocab = data.build_vocab([_rec(0, "alpha beta gamma", "x = alpha")], max_size=20)
    again = data.Vocab.from_json(vocab.to_json())
    assert again.to_json() == vocab.to_json()


def test_filter_drops_short_pair():
    kept, report = data.filter_pairs([_rec(0, "ok thanks", "def f(): return 1")])
    assert kept == []
    assert report.too_short == 1


def test_filter_truncates_long_code():
    code = " ".join(f"tok{i}" for i in range(300))
    kept, report = data.filter_pairs([_rec(0, "a fine description here", code)])
    assert len(kept) == 1
    assert len(data.tokenize(kept[0].code, "code")) == 256
    assert report.truncated_code == 1


def test_filter_non_english_fixture():
    # Hand-made 10-record fixture: 3 drop rules exercised together.
    records = [
        _rec(0, "compute the mean of values", "def mean(xs): return sum(xs)/len(xs)"),
        _rec(1, "пересчитать среднее значение быстро", "def mean2(xs): return 0"),  # non-English
        _rec(2, "short", "def f(): pass"),  # 1 token text
        _rec(3, "sort the list in place", "xs.sort()"),
        _rec(4, "найти сумму элементов списка", "def total(xs): return sum(xs)"),  # non-English
        _rec(5, "open the file and read", "open(p).read()"),
        _rec(6, "x y", "def g(): pass"),  # 2 tokens
        _rec(7, "reverse a string quickly", "s[::-1]"),
        _rec(8, "mixed ascii текст here ok", "print(1)"),  # 50% non-ASCII letters
        _rec(9, "join the tokens with spaces", "' '.join(t)"),
    ]
    kept, report = data.filter_pairs(records)
    assert {r.id for r in kept} == {"r0", "r3", "r5", "r7", "r9"}
    assert report.non_english == 3
    assert report.too_short == 2
    assert report.kept == 5


def test_filter_idempotent():
    code = " ".join(f"tok{i}" for i in range(300))
    records = [
        _rec(0, "a fine description of things", code),
        _rec(1, "Words With CASE, punct!", "x = f(y) + 1"),
    ]
    once, _ = data.filter_pairs(records)
    twice, report = data.filter_pairs(once)
    assert twice == once
    assert report.too_short == 0 and report.non_english == 0
    assert report.truncated_text == 0 and report.truncated_code == 0


def test_filter_rescan_bounds():
    rng = np.random.default_rng(3)
    records = [
        _rec(i, " ".join(f"w{rng.integers(50)}" for _ in range(rng.integers(1, 400))),
             " ".join(f"c{rng.integers(50)}" for _ in range(rng.integers(1, 400))))
        for i in range(50)
    ]
    kept, _ = data.filter_pairs(records)
    for rec in kept:
        assert 3 <= len(data.tokenize(rec.text, "text")) <= 256
        assert 3 <= len(data.tokenize(rec.code, "code")) <= 256


def test_split_sizes():
    records = [_rec(i, "t", "c") for i in range(10)]
    splits = data.split_dataset(records, (0.8, 0.1, 0.1), seed=0)
    assert (len(splits["train"]), len(splits["valid"]), len(splits["test"])) == (8, 1, 1)
    all_ids = {r.id for s in splits.values() for r in s}
    assert all_ids == {r.id for r in records}


def test_split_deterministic_and_seed_sensitive():
    records = [_rec(i, "t", "c") for i in range(1000)]
    a = data.split_dataset(records, seed=1)
    b = data.split_dataset(records, seed=1)
    c = data.split_dataset(records, seed=2)
    assert [r.id for r in a["train"]] == [r.id for r in b["train"]]
    assert [r.id for r in a["train"]] != [r.id for r in c["train"]]


def test_split_too_few_records():
    with pytest.raises(DataError):
        data.split_dataset([_rec(0, "t", "c")], (0.4, 0.3, 0.3), seed=0)


def test_make_batches_counts_and_masks():
    records = [_rec(i, f"word{i} two three", f"x{i} = {i} + 1") for i in range(10)]
    vocab = data.build_vocab(records, max_size=200)
    batches = list(data.make_batches(records, vocab, batch_size=4, seed=0, drop_last=True))
    assert len(batches) == 2
    for b in batches:
        assert np.array_equal(b.text_mask, (b.text_ids != data.PAD_ID).astype(float))
        assert np.array_equal(b.code_mask, (b.code_ids != data.PAD_ID).astype(float))


def test_make_batches_epoch_reshuffle():
    records = [_rec(i, f"one two three{i}", f"y = {i}") for i in range(32)]
    vocab = data.build_vocab(records, max_size=200)
    e0 = [b.ids for b in data.make_batches(records, vocab, 8, seed=5, epoch=0)]
    e0_again = [b.ids for b in data.make_batches(records, vocab, 8, seed=5, epoch=0)]
    e1 = [b.ids for b in data.make_batches(records, vocab, 8, seed=5, epoch=1)]
    assert e0 == e0_again
    assert e0 != e1


def test_make_batches_batch_size_floor():
    records = [_rec(i, "a b c", "d e f") for i in range(4)]
    vocab = data.build_vocab(records, max_size=20)
    with pytest.raises(ConfigError):
        list(data.make_batches(records, vocab, batch_size=1))


def test_pair_file_round_trip(tmp_path):
    records = [_rec(i, f"find the thing {i}", f"def f{i}(): return {i}") for i in range(5)]
    p = tmp_path / "pairs.jsonl"
    data.write_pairs(p, records)
    assert data.read_pairs(p) == records
    with_offsets = data.read_pairs_with_offsets(p)
    raw = p.read_bytes()
    for rec, start, end in with_offsets:
        assert data.record_to_json(rec).encode() in raw[start:end]


def test_read_pairs_rejects_duplicates(tmp_path):
    p = tmp_path / "dup.jsonl"
    line = data.record_to_json(_rec(0, "a b c", "d e f"))
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(DataError):
        data.read_pairs(p)


def test_split_files_byte_identical(tmp_path):
    records = [_rec(i, f"text number {i} ok", f"code_{i} = {i}") for i in range(30)]
    out = []
    for run in range(2):
        splits = data.split_dataset(records, seed=9)
        p = tmp_path / f"train_{run}.jsonl"
        data.write_pairs(p, splits["train"])
        out.append(p.read_bytes())
    assert out[0] == out[1]
