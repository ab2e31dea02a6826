from __future__ import annotations

import json
import math

import numpy as np
import pytest

from peftsearch import autodiff as ad
from peftsearch.adapters import LoraConfig, attach
from peftsearch.autodiff import Parameter
from peftsearch.data import PairRecord, build_vocab, make_batches
from peftsearch.encoder import EncoderConfig, encode_batch, init_encoder
from peftsearch.errors import CheckpointError, ConfigError, NumericError
from peftsearch.objective import nt_xent, similarity_matrix
from peftsearch.training import (
    Adam,
    TrainConfig,
    cosine_annealing,
    load_checkpoint,
    save_checkpoint,
    train,
    vocab_hash,
)


def _toy_corpus(n=24):
    records = []
    for i in range(n):
        sig = f"sig{i:02d}"
        records.append(PairRecord(
            id=f"p{i}",
            text=f"find the {sig} helper now",
            code=f"def {sig} ( x ) : return x",
            lang="toy",
        ))
    return records


@pytest.fixture
def toy_setup(tiny_config):
    records = _toy_corpus()
    vocab = build_vocab(records, max_size=80)
    config = EncoderConfig(
        layers=tiny_config.layers, d_model=tiny_config.d_model, heads=tiny_config.heads,
        d_ff=tiny_config.d_ff, vocab_size=vocab.size, max_len=16, d_emb=tiny_config.d_emb,
    )
    return records, vocab, config


def test_cosine_annealing_boundaries():
    assert cosine_annealing(0, 10, 0.1) == 0.1
    assert cosine_annealing(10, 10, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_annealing(5, 10, 0.1, 0.02) == pytest.approx(0.06)


def test_cosine_annealing_clamps_past_horizon(caplog):
    with caplog.at_level("WARNING"):
        lr = cosine_annealing(15, 10, 0.1, 0.01)
    assert lr == 0.01
    assert any("clamping" in r.message for r in caplog.records)


def test_cosine_annealing_validation():
    with pytest.raises(ConfigError):
        cosine_annealing(0, 0, 0.1)
    with pytest.raises(ConfigError):
        cosine_annealing(-1, 10, 0.1)


def test_adam_zero_gradient_keeps_parameter():
    p = Parameter(np.array([1.0, -2.0]), trainable=True, id="p")
    opt = Adam([p])
    for _ in range(5):
        p.tensor.grad = np.zeros(2)
        opt.step(0.1)
    np.testing.assert_array_equal(p.tensor.data, [1.0, -2.0])


def test_adam_first_step_hand_value():
    p = Parameter(np.array([0.0]), trainable=True, id="p")
    opt = Adam([p])
    p.tensor.grad = np.array([1.0])
    opt.step(0.1)
    # bias-corrected first step moves by ~ -lr
    assert p.tensor.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_ignores_frozen_parameters():
    frozen = Parameter(np.array([1.0]), trainable=False, id="frozen")
    live = Parameter(np.array([1.0]), trainable=True, id="live")
    opt = Adam([frozen, live])
    assert "frozen" not in opt.m
    frozen.tensor.grad = np.array([5.0])
    live.tensor.grad = np.array([5.0])
    opt.step(0.1)
    assert frozen.tensor.data[0] == 1.0
    assert live.tensor.data[0] != 1.0


def test_train_deterministic_loss_trace(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    traces = []
    for run in range(2):
        encoder = init_encoder(config, seed=7)
        cfg = TrainConfig(method="lora", epochs=2, batch_size=4, accum_steps=2, seed=7)
        result = train(cfg, encoder, records, vocab, LoraConfig(rank=2))
        traces.append([m["loss"] for m in result.metrics if "loss" in m])
    assert traces[0] == traces[1]


def test_gradient_accumulation_matches_summed_loss(toy_setup):
    records, vocab, config = toy_setup
    vh = vocab

    def micro_losses(weights, adapter, batches):
        total = None
        for b in batches:
            hc = encode_batch(weights, b.code_ids, b.code_mask, adapter)
            ht = encode_batch(weights, b.text_ids, b.text_mask, adapter)
            loss = nt_xent(similarity_matrix(hc, ht, 0.08))
            total = loss if total is None else ad.add(total, loss)
        return total

    batches = list(make_batches(records, vh, 4, seed=3, epoch=0))[:3]

    # accumulate per-batch backward
    enc_a = init_encoder(config, seed=1)
    adapter_a = attach("lora", LoraConfig(rank=2), enc_a, seed=2)
    for b in batches:
        hc = encode_batch(enc_a, b.code_ids, b.code_mask, adapter_a)
        ht = encode_batch(enc_a, b.text_ids, b.text_mask, adapter_a)
        nt_xent(similarity_matrix(hc, ht, 0.08)).backward()
    grads_a = {k: p.tensor.grad.copy() for k, p in adapter_a.params.items()}

    # single backward of the summed loss
    enc_b = init_encoder(config, seed=1)
    adapter_b = attach("lora", LoraConfig(rank=2), enc_b, seed=2)
    micro_losses(enc_b, adapter_b, batches).backward()
    for key, ga in grads_a.items():
        np.testing.assert_allclose(ga, adapter_b.params[key].tensor.grad, atol=1e-12)


def test_frozen_base_bitwise_invariant_over_run(toy_setup):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=4)
    before = {n: encoder.tensor(n).data.copy() for n in encoder.names()}
    cfg = TrainConfig(method="ia3", epochs=2, batch_size=4, accum_steps=1, seed=4)
    train(cfg, encoder, records, vocab)
    for name in encoder.names():
        assert np.array_equal(encoder.tensor(name).data, before[name])


def test_method_none_is_evaluation_only(toy_setup):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=5)
    before = {n: encoder.tensor(n).data.copy() for n in encoder.names()}
    cfg = TrainConfig(method="none", seed=5, valid_chunk_size=8)
    result = train(cfg, encoder, records, vocab, valid_records=records[:8])
    after_mrr = train(cfg, encoder, records, vocab, valid_records=records[:8]).best_valid_mrr
    assert result.best_valid_mrr == after_mrr
    for name in encoder.names():
        assert np.array_equal(encoder.tensor(name).data, before[name])


def test_checkpoint_round_trip_bytes(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=6)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, accum_steps=2, seed=6)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=2), out_dir=tmp_path)
    first = result.final_path.read_bytes()
    bundle = load_checkpoint(result.final_path)
    second_path = tmp_path / "again.ckpt"
    save_checkpoint(
        second_path,
        {k: v for k, v in bundle.header.items() if k not in ("tensors", "format_version")},
        bundle.adapter.state_arrays(),
    )
    assert second_path.read_bytes() == first


def test_checkpoint_rejects_tampered_version(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=6)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, seed=6)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=2), out_dir=tmp_path)
    blob = result.final_path.read_bytes()
    newline = blob.find(b"\n")
    header = json.loads(blob[:newline])
    header["format_version"] = 99
    tampered = tmp_path / "tampered.ckpt"
    tampered.write_bytes(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + blob[newline:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tampered)


def test_checkpoint_forward_drift_within_float32(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=8)
    cfg = TrainConfig(method="lora", epochs=2, batch_size=4, accum_steps=1, seed=8)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=2), out_dir=tmp_path)
    bundle = load_checkpoint(result.final_path)
    batch = next(iter(make_batches(records, vocab, 4, seed=0, epoch=0)))
    live = encode_batch(encoder, batch.code_ids, batch.code_mask, result.adapter).data
    loaded = bundle.encode_batch(batch.code_ids, batch.code_mask).data
    assert np.max(np.abs(live - loaded)) <= 1e-6


def test_checkpoint_contains_exactly_adapter_scalars(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=9)
    method_config = LoraConfig(rank=2)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, seed=9)
    result = train(cfg, encoder, records, vocab, method_config, out_dir=tmp_path)
    bundle = load_checkpoint(result.final_path)
    payload_scalars = sum(int(np.prod(e["shape"])) for e in bundle.header["tensors"])
    from peftsearch.adapters import count_trainable

    assert payload_scalars == count_trainable("lora", method_config, config)


def test_checkpoint_vocab_hash_checked(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=10)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, seed=10)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=2), out_dir=tmp_path)
    load_checkpoint(result.final_path, expect_vocab_hash=vocab_hash(vocab))
    with pytest.raises(CheckpointError):
        load_checkpoint(result.final_path, expect_vocab_hash="0" * 64)


def test_full_checkpoint_round_trip(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=11)
    cfg = TrainConfig(method="full", epochs=1, batch_size=4, seed=11)
    result = train(cfg, encoder, records, vocab, out_dir=tmp_path)
    bundle = load_checkpoint(result.final_path)
    for name in encoder.names():
        live = encoder.tensor(name).data
        assert np.max(np.abs(bundle.weights.tensor(name).data - live)) <= 1e-6


def test_abort_on_non_finite_loss_writes_last_good(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=12)
    encoder.tensor("proj").data[0, 0] = np.inf  # poisoned base -> NaN loss
    cfg = TrainConfig(method="lora", epochs=2, batch_size=4, accum_steps=1, seed=12)
    with pytest.raises(NumericError, match="non-finite"):
        train(cfg, encoder, records, vocab, LoraConfig(rank=2), out_dir=tmp_path)
    assert (tmp_path / "final.ckpt").exists()
    blob = (tmp_path / "final.ckpt").read_bytes()
    header = json.loads(blob[: blob.find(b"\n")])
    assert header["step"] == 0  # nothing good beyond the initial state
    bundle_arrays = load_checkpoint(tmp_path / "final.ckpt").adapter.state_arrays()
    for arr in bundle_arrays.values():
        assert np.all(np.isfinite(arr))


def test_learnable_tau_changes(toy_setup):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=13)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, learnable_tau=True, seed=13)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=2))
    assert result.tau != cfg.tau
    assert math.isfinite(result.tau)


def test_train_loss_decreases_on_desk_fixture(toy_setup):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=14)
    cfg = TrainConfig(method="lora", epochs=40, batch_size=8, accum_steps=1, seed=14, max_steps=200)
    result = train(cfg, encoder, records, vocab, LoraConfig(rank=4))
    losses = [m["loss"] for m in result.metrics if "loss" in m]
    assert losses[-1] < 0.5 * losses[0]


def test_metrics_log_schema(toy_setup, tmp_path):
    records, vocab, config = toy_setup
    encoder = init_encoder(config, seed=15)
    cfg = TrainConfig(method="lora", epochs=1, batch_size=4, accum_steps=2, seed=15, valid_chunk_size=8)
    train(cfg, encoder, records, vocab, LoraConfig(rank=2), valid_records=records[:8], out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    parsed = [json.loads(l) for l in lines]
    step_records = [p for p in parsed if "step" in p]
    epoch_records = [p for p in parsed if "epoch" in p]
    assert step_records and epoch_records
    assert set(step_records[0]) == {"step", "lr", "loss"}
    assert set(epoch_records[0]) == {"epoch", "valid_mrr"}
    assert (tmp_path / "best.ckpt").exists()
