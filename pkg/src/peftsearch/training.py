"""Fine-tuning loop: Adam, cosine-annealed learning rate, gradient
accumulation, adapter-only checkpoints, and per-epoch validation MRR.

One run owns its model and optimizer state exclusively and is fully
deterministic under its seed: two runs with identical inputs produce
identical loss traces and identical checkpoint bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import (
    Adapter,
    AdaLoraAdapter,
    adalora_step,
    attach,
    build_adapter,
    config_from_dict,
    config_to_dict,
    count_trainable,
    default_config,
)
from .autodiff import Parameter, Tensor
from .data import PairRecord, Vocab, make_batches
from .embedding import embed_pairs
from .encoder import EncoderConfig, EncoderWeights, encode_batch, init_encoder
from .errors import CheckpointError, ConfigError, NumericError
from .metrics import mrr_chunked
from .objective import nt_xent, similarity_matrix

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METHODS = ("full", "lora", "adalora", "ia3", "prompt", "none")
ADAPTER_METHODS = ("lora", "adalora", "ia3", "prompt")


def cosine_annealing(t: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T)); t past T clamps to lr_min."""
    if total < 1:
        raise ConfigError(f"scheduler horizon must be >= 1, got {total}")
    if t < 0:
        raise ConfigError(f"step index must be non-negative, got {t}")
    if t > total:
        log.warning("cosine_annealing: step %d beyond horizon %d; clamping to lr_min", t, total)
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class Adam:
    """Adam with beta=(0.9, 0.999), eps 1e-8, no weight decay.

    Only trainable parameters get state tensors; frozen ones are ignored
    entirely.
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.id: np.zeros_like(p.tensor.data) for p in self.params}
        self.v = {p.id: np.zeros_like(p.tensor.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            m = self.m[p.id]
            v = self.v[p.id]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()


@dataclass
class TrainConfig:
    method: str = "lora"
    lr: float = 0.001
    lr_min: float = 0.0
    batch_size: int = 32  # full-scale runs use 128
    accum_steps: int = 4
    epochs: int = 3
    tau: float = 0.08
    learnable_tau: bool = False
    seed: int = 0
    max_steps: int | None = None
    valid_chunk_size: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown training method {self.method!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.accum_steps < 1:
            raise ConfigError("gradient accumulation steps must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 for in-batch negatives")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class TrainResult:
    weights: EncoderWeights
    adapter: Adapter | None
    metrics: list[dict]
    steps: int
    tau: float
    final_path: Path | None = None
    best_path: Path | None = None
    best_valid_mrr: float | None = None


def vocab_hash(vocab: Vocab) -> str:
    return hashlib.sha256(vocab.to_json().encode("utf-8")).hexdigest()


def _tensor_payload(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    manifest = []
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name]
        manifest.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return manifest, b"".join(chunks)


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> str:
    """Write header JSON line + float32 little-endian payload; returns sha256."""
    manifest, payload = _tensor_payload(tensors)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = manifest
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + payload
    path = Path(path)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


@dataclass
class CheckpointBundle:
    path: Path
    header: dict
    method: str
    encoder_config: EncoderConfig
    weights: EncoderWeights
    adapter: Adapter | None
    tau: float
    fingerprint: str
    vocab: Vocab | None = None

    def encode_batch(self, ids, mask) -> Tensor:
        return encode_batch(self.weights, ids, mask, self.adapter)

    def attach_vocab(self, vocab: Vocab) -> "CheckpointBundle":
        if vocab_hash(vocab) != self.header.get("vocab_sha256"):
            raise CheckpointError(f"{self.path}: vocabulary hash mismatch")
        self.vocab = vocab
        return self


def _read_tensors(header: dict, payload: bytes, path) -> dict[str, np.ndarray]:
    tensors = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(int(x) for x in entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = payload[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor payload at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return tensors


def load_checkpoint(
    path,
    expect_vocab_hash: str | None = None,
    expect_encoder_config: EncoderConfig | None = None,
    vocab: Vocab | None = None,
) -> CheckpointBundle:
    """Load and validate a checkpoint; reconstructs the frozen base for
    adapter-only files from the recorded seed or base-checkpoint reference."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fingerprint = hashlib.sha256(blob).hexdigest()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    method = header.get("method")
    if method not in METHODS:
        raise CheckpointError(f"{path}: unknown method {method!r}")
    encoder_config = EncoderConfig.from_dict(header["encoder_config"])
    if expect_encoder_config is not None and encoder_config != expect_encoder_config:
        raise CheckpointError(f"{path}: encoder config mismatch")
    if expect_vocab_hash is not None and header.get("vocab_sha256") != expect_vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    tensors = _read_tensors(header, blob[newline + 1 :], path)
    tau = float(header.get("tau", 0.08))

    if method in ("full", "none"):
        skeleton = init_encoder(encoder_config, seed=0)
        if set(tensors) != set(skeleton.names()):
            raise CheckpointError(f"{path}: tensor names do not match the encoder layout")
        for name, arr in tensors.items():
            p = skeleton.params[name]
            if arr.shape != p.tensor.data.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            p.tensor.data = arr
        bundle = CheckpointBundle(path, header, method, encoder_config, skeleton, None, tau, fingerprint)
        return bundle.attach_vocab(vocab) if vocab is not None else bundle

    base_ref = header.get("base") or {}
    if base_ref.get("kind") == "seeded":
        weights = init_encoder(encoder_config, seed=int(base_ref["seed"]))
    elif base_ref.get("kind") == "checkpoint":
        base_path = Path(base_ref["path"])
        if not base_path.is_absolute():
            base_path = path.parent / base_path
        base_bundle = load_checkpoint(base_path, expect_encoder_config=encoder_config)
        if base_ref.get("sha256") and base_bundle.fingerprint != base_ref["sha256"]:
            raise CheckpointError(f"{path}: base checkpoint fingerprint mismatch")
        weights = base_bundle.weights
    else:
        raise CheckpointError(f"{path}: adapter checkpoint lacks a usable base reference")
    weights.freeze()
    method_config = config_from_dict(method, header["adapter_config"])
    adapter = build_adapter(
        method, method_config, encoder_config,
        seed=int(header.get("adapter_seed", 0)),
        tok_emb=weights.tensor("tok_emb").data,
    )
    adapter.load_state(tensors)
    adapter.load_extra_header(header.get("extra", {}))
    bundle = CheckpointBundle(path, header, method, encoder_config, weights, adapter, tau, fingerprint)
    return bundle.attach_vocab(vocab) if vocab is not None else bundle


def _checkpoint_header(
    method: str,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    method_config,
    vocab: Vocab,
    step: int,
    tau: float,
    base_ref: dict | None,
    adapter: Adapter | None,
) -> dict:
    header = {
        "method": method,
        "encoder_config": encoder_config.to_dict(),
        "adapter_config": config_to_dict(method_config) if method in ADAPTER_METHODS else None,
        "vocab_sha256": vocab_hash(vocab),
        "seed": config.seed,
        "step": step,
        "tau": tau,
        "base": base_ref if method in ADAPTER_METHODS else None,
        "adapter_seed": config.seed if method in ADAPTER_METHODS else None,
        "extra": adapter.extra_header() if adapter is not None else {},
    }
    return header


def _finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def train(
    config: TrainConfig,
    encoder: EncoderWeights,
    train_records: list[PairRecord],
    vocab: Vocab,
    method_config=None,
    valid_records: list[PairRecord] | None = None,
    out_dir=None,
    base_ref: dict | None = None,
) -> TrainResult:
    """Run the contrastive fine-tuning loop.

    ``method=none`` performs no updates (evaluation-only); ``method=full``
    trains every encoder weight (used to manufacture a frozen base);
    adapter methods freeze the base and train only the adapter tensors.
    """
    if not train_records and config.method != "none":
        raise ConfigError("training requires a non-empty train split")
    cfg = encoder.config
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    adapter: Adapter | None = None
    if config.method in ADAPTER_METHODS:
        if method_config is None:
            method_config = default_config(config.method)
        adapter = attach(config.method, method_config, encoder, seed=config.seed)
        if base_ref is None:
            base_ref = {"kind": "seeded", "seed": config.seed}
        trainables = adapter.trainable_params()
    elif config.method == "full":
        trainables = encoder.trainable_params()
        if not trainables:
            raise ConfigError("full fine-tuning requires trainable base weights")
    else:  # none
        trainables = []

    inv_tau = None
    if config.learnable_tau and config.method != "none":
        inv_tau = Parameter(np.array(1.0 / config.tau), trainable=True, id="inv_tau")
        trainables = trainables + [inv_tau]

    def current_tau() -> float:
        return 1.0 / float(inv_tau.tensor.data) if inv_tau is not None else config.tau

    def loss_for(batch) -> Tensor:
        hc = encode_batch(encoder, batch.code_ids, batch.code_mask, adapter)
        ht = encode_batch(encoder, batch.text_ids, batch.text_mask, adapter)
        if inv_tau is not None:
            scores = ad.mul(ad.matmul(hc, ad.transpose_last2(ht)), inv_tau.tensor)
            loss = nt_xent(scores)
        else:
            loss = nt_xent(similarity_matrix(hc, ht, config.tau))
        if isinstance(adapter, AdaLoraAdapter):
            loss = ad.add(loss, adapter.orthogonality_penalty())
        return loss

    def snapshot_tensors() -> dict[str, np.ndarray]:
        if adapter is not None:
            return {k: v.copy() for k, v in adapter.state_arrays().items()}
        return {name: encoder.tensor(name).data.copy() for name in encoder.names()}

    def write_checkpoint(path, tensors, step, tau_value):
        header = _checkpoint_header(
            config.method, cfg, config, method_config, vocab, step, tau_value, base_ref, adapter
        )
        return save_checkpoint(path, header, tensors)

    def validation_mrr() -> float | None:
        if not valid_records:
            return None
        hc, ht = embed_pairs(encoder, vocab, valid_records, adapter)
        chunk = min(config.valid_chunk_size or 1000, len(valid_records))
        return mrr_chunked(hc, ht, chunk=chunk).mrr

    metrics: list[dict] = []
    result = TrainResult(weights=encoder, adapter=adapter, metrics=metrics, steps=0, tau=config.tau)

    if config.method == "none":
        mrr = validation_mrr()
        if mrr is not None:
            metrics.append({"epoch": 0, "valid_mrr": mrr})
            result.best_valid_mrr = mrr
        if out_dir is not None:
            final = out_dir / "final.ckpt"
            write_checkpoint(final, snapshot_tensors(), step=0, tau_value=config.tau)
            result.final_path = final
            _write_metrics(out_dir / "metrics.jsonl", metrics)
        return result

    n_batches = len(train_records) // config.batch_size
    if n_batches == 0:
        raise ConfigError(
            f"train split of {len(train_records)} pairs is smaller than one batch of {config.batch_size}"
        )
    steps_per_epoch = math.ceil(n_batches / config.accum_steps)
    total_steps = steps_per_epoch * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    optimizer = Adam(trainables)
    t = 0
    last_good = (snapshot_tensors(), 0, current_tau())
    best: tuple[float, dict[str, np.ndarray], int, float] | None = None

    def abort(reason: str):
        if out_dir is not None:
            final = out_dir / "final.ckpt"
            write_checkpoint(final, last_good[0], step=last_good[1], tau_value=last_good[2])
            result.final_path = final
            _write_metrics(out_dir / "metrics.jsonl", metrics)
        raise NumericError(f"{reason}; last good checkpoint is from step {last_good[1]}")

    reserve = int(getattr(getattr(adapter, "config", None), "m", 0) or 0)
    seq_limit = cfg.max_len - reserve
    done = False
    for epoch in range(config.epochs):
        if done:
            break
        micro_losses: list[float] = []
        pending = 0
        for batch in make_batches(
            train_records, vocab, config.batch_size, config.seed, epoch,
            max_text=seq_limit, max_code=seq_limit,
        ):
            loss = loss_for(batch)
            value = loss.item()
            if not math.isfinite(value):
                abort(f"non-finite loss at optimizer step {t}")
            loss.backward()
            micro_losses.append(value)
            pending += 1
            if pending == config.accum_steps:
                lr_t = cosine_annealing(t, total_steps, config.lr, config.lr_min)
                optimizer.step(lr_t)
                if isinstance(adapter, AdaLoraAdapter):
                    adalora_step(adapter, t)
                optimizer.zero_grad()
                metrics.append({"step": t, "lr": lr_t, "loss": sum(micro_losses) / len(micro_losses)})
                snap = snapshot_tensors()
                if _finite(snap.values()):
                    last_good = (snap, t + 1, current_tau())
                micro_losses = []
                pending = 0
                t += 1
                if t >= total_steps:
                    done = True
                    break
        if pending and not done:
            lr_t = cosine_annealing(t, total_steps, config.lr, config.lr_min)
            optimizer.step(lr_t)
            if isinstance(adapter, AdaLoraAdapter):
                adalora_step(adapter, t)
            optimizer.zero_grad()
            metrics.append({"step": t, "lr": lr_t, "loss": sum(micro_losses) / len(micro_losses)})
            snap = snapshot_tensors()
            if _finite(snap.values()):
                last_good = (snap, t + 1, current_tau())
            t += 1
            if t >= total_steps:
                done = True
        mrr = validation_mrr()
        if mrr is not None:
            metrics.append({"epoch": epoch, "valid_mrr": mrr})
            if best is None or mrr > best[0]:
                best = (mrr, snapshot_tensors(), t, current_tau())

    result.steps = t
    result.tau = current_tau()
    if best is not None:
        result.best_valid_mrr = best[0]
    if out_dir is not None:
        final = out_dir / "final.ckpt"
        write_checkpoint(final, snapshot_tensors(), step=t, tau_value=current_tau())
        result.final_path = final
        if best is not None:
            best_path = out_dir / "best.ckpt"
            write_checkpoint(best_path, best[1], step=best[2], tau_value=best[3])
            result.best_path = best_path
        _write_metrics(out_dir / "metrics.jsonl", metrics)
    return result


def _write_metrics(path: Path, metrics: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in metrics:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def checkpoint_trainable_scalars(path) -> int:
    """Number of payload scalars in a checkpoint file (audit helper)."""
    bundle = load_checkpoint(path)
    return sum(int(np.prod(e["shape"])) for e in bundle.header["tensors"])


def expected_adapter_scalars(method: str, method_config, encoder_config: EncoderConfig) -> int:
    return count_trainable(method, method_config, encoder_config)
