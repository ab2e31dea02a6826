"""A small pre-norm transformer encoder with a projection/normalization head.

Text and code share one tower.  The forward pass is: token + learned
position embeddings, an optional adapter prepend step, L pre-norm blocks
(masked multi-head self-attention + feed-forward with residuals), masked
mean pooling over non-PAD (and non-prompt) positions, a linear projection
to the embedding width, and L2 normalization, so every output has unit
norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DataError

ATTN_MASK_VALUE = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    d_model: int
    heads: int
    d_ff: int
    vocab_size: int
    max_len: int
    d_emb: int

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_emb > self.d_model:
            raise ConfigError(f"d_emb={self.d_emb} exceeds d_model={self.d_model}")
        for name in ("layers", "d_model", "heads", "d_ff", "vocab_size", "max_len", "d_emb"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def desk(cls, vocab_size: int, max_len: int = 64) -> "EncoderConfig":
        """Default small configuration used for local training."""
        return cls(layers=2, d_model=64, heads=4, d_ff=128, vocab_size=vocab_size,
                   max_len=max_len, d_emb=32)

    @classmethod
    def audit_profile(cls) -> "EncoderConfig":
        """The 110M-model geometry used for the parameter-budget audit."""
        return cls(layers=12, d_model=768, heads=12, d_ff=3072, vocab_size=32100,
                   max_len=512, d_emb=256)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: int(v) for k, v in d.items()})

    def param_count(self) -> int:
        """Closed-form number of scalars in a freshly initialized encoder."""
        d, dff = self.d_model, self.d_ff
        per_layer = 4 * d * d + 2 * d * dff + 4 * d
        return (self.vocab_size * d + self.max_len * d
                + self.layers * per_layer + d * self.d_emb)


class AdapterHooks:
    """Extension points the encoder consults during a forward pass.

    The base class is a no-op; adapter implementations override the hooks
    they need.  ``project`` computes a named linear projection, ``scale``
    rescales an activation, and ``prepend`` may insert virtual positions
    before the first block (extending the attention mask but not the
    pooling mask).
    """

    def prepend(self, x: Tensor, attn_mask: np.ndarray, pool_mask: np.ndarray):
        return x, attn_mask, pool_mask

    def project(self, layer: int, name: str, x: Tensor, w: Tensor) -> Tensor:
        return ad.matmul(x, w)

    def scale(self, layer: int, point: str, t: Tensor) -> Tensor:
        return t

    def trainable_params(self) -> list[Parameter]:
        return []


_NULL_ADAPTER = AdapterHooks()


class EncoderWeights:
    """All named parameters of one encoder instance."""

    def __init__(self, config: EncoderConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def names(self) -> list[str]:
        return list(self.params.keys())

    def freeze(self) -> None:
        for p in self.params.values():
            p.trainable = False

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def num_params(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def copy(self) -> "EncoderWeights":
        out = {}
        for name, p in self.params.items():
            out[name] = Parameter(p.tensor.data.copy(), p.trainable, name)
        return EncoderWeights(self.config, out)


def init_encoder(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Deterministic seeded initialization: N(0, 0.02) weights, unit gains."""
    rng = np.random.default_rng(seed)
    d, dff = config.d_model, config.d_ff

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    params: dict[str, Parameter] = {}

    def put(name, data):
        params[name] = Parameter(data, trainable=True, id=name)

    put("tok_emb", normal(config.vocab_size, d))
    put("pos_emb", normal(config.max_len, d))
    for i in range(config.layers):
        base = f"layers.{i}"
        put(f"{base}.ln1.gain", np.ones(d))
        put(f"{base}.ln1.bias", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            put(f"{base}.attn.{name}", normal(d, d))
        put(f"{base}.ln2.gain", np.ones(d))
        put(f"{base}.ln2.bias", np.zeros(d))
        put(f"{base}.ff.w1", normal(d, dff))
        put(f"{base}.ff.w2", normal(dff, d))
    put("proj", normal(d, config.d_emb))
    return EncoderWeights(config, params)


def _attention_bias(attn_mask: np.ndarray) -> Tensor:
    """(N,T,T) additive bias: 0 on real key positions, -1e9 on PAD keys."""
    n, t = attn_mask.shape
    bias = np.where(attn_mask > 0, 0.0, ATTN_MASK_VALUE)
    return ad.constant(np.broadcast_to(bias[:, None, :], (n, t, t)).copy())


def encode_batch(
    weights: EncoderWeights,
    ids: np.ndarray,
    mask: np.ndarray,
    adapter: AdapterHooks | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Embed a padded (N,T) id batch into unit-norm rows of shape (N, d_emb)."""
    adapter = adapter or _NULL_ADAPTER
    cfg = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise ConfigError(f"ids/mask must be matching 2-D arrays, got {ids.shape} and {mask.shape}")
    n, t = ids.shape
    if t > cfg.max_len:
        raise ConfigError(f"sequence length {t} exceeds max_len {cfg.max_len}")
    if np.any(mask.sum(axis=1) == 0):
        raise DataError("batch contains an all-PAD sequence")

    x = ad.embedding_lookup(weights.tensor("tok_emb"), ids)
    pos = ad.narrow(weights.tensor("pos_emb"), 0, 0, t)
    x = ad.add(x, pos)

    x, attn_mask, pool_mask = adapter.prepend(x, mask, mask)
    t_full = x.shape[1]
    if t_full > cfg.max_len:
        raise ConfigError(f"prepended length {t_full} exceeds max_len {cfg.max_len}")

    bias = _attention_bias(attn_mask)
    d, h = cfg.d_model, cfg.heads
    dk = d // h
    inv_sqrt_dk = 1.0 / math.sqrt(dk)

    for i in range(cfg.layers):
        base = f"layers.{i}"
        hidden = ad.layer_norm(x, weights.tensor(f"{base}.ln1.gain"), weights.tensor(f"{base}.ln1.bias"))
        q = adapter.project(i, "q", hidden, weights.tensor(f"{base}.attn.wq"))
        k = adapter.project(i, "k", hidden, weights.tensor(f"{base}.attn.wk"))
        v = adapter.project(i, "v", hidden, weights.tensor(f"{base}.attn.wv"))
        q = adapter.scale(i, "q", q)
        k = adapter.scale(i, "k", k)
        heads = []
        for j in range(h):
            qh = ad.narrow(q, 2, j * dk, dk)
            kh = ad.narrow(k, 2, j * dk, dk)
            vh = ad.narrow(v, 2, j * dk, dk)
            logits = ad.add(ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), inv_sqrt_dk), bias)
            att = ad.softmax(logits, axis=-1)
            if attn_sink is not None:
                attn_sink.append(att.data)
            heads.append(ad.matmul(att, vh))
        ctx = ad.concat(heads, axis=2)
        out = ad.matmul(ctx, weights.tensor(f"{base}.attn.wo"))
        out = adapter.scale(i, "out", out)
        x = ad.add(x, out)

        hidden = ad.layer_norm(x, weights.tensor(f"{base}.ln2.gain"), weights.tensor(f"{base}.ln2.bias"))
        ff = ad.matmul(ad.relu(ad.matmul(hidden, weights.tensor(f"{base}.ff.w1"))),
                       weights.tensor(f"{base}.ff.w2"))
        x = ad.add(x, ff)

    counts = pool_mask.sum(axis=1)
    pool_row = ad.constant((pool_mask / counts[:, None])[:, None, :])  # (N,1,T')
    pooled = ad.matmul(pool_row, x).reshape(n, d)
    projected = ad.matmul(pooled, weights.tensor("proj"))
    return ad.l2_normalize(projected)


def encode(
    weights: EncoderWeights,
    ids,
    mask=None,
    adapter: AdapterHooks | None = None,
) -> Tensor:
    """Embed one id sequence into a unit-norm vector of length d_emb."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ConfigError(f"encode expects a 1-D id sequence, got shape {ids.shape}")
    if mask is None:
        mask = np.ones_like(ids, dtype=np.float64)
    out = encode_batch(weights, ids[None, :], np.asarray(mask, dtype=np.float64)[None, :], adapter)
    return out.reshape(int(weights.config.d_emb))


def encode_pair_batch(weights: EncoderWeights, batch, adapter: AdapterHooks | None = None):
    """Embed both sides of a Batch through the shared tower -> (Hc, Ht)."""
    hc = encode_batch(weights, batch.code_ids, batch.code_mask, adapter)
    ht = encode_batch(weights, batch.text_ids, batch.text_mask, adapter)
    return hc, ht
