"""Parameter-efficient adapters over a frozen encoder.

Four mechanisms, each adding a small set of trainable tensors while every
base weight stays frozen:

* low-rank adapters (``lora``): additive update W + (alpha/r) * B @ A on the
  attention Q/V projections;
* adaptive low-rank adapters (``adalora``): SVD-form update P diag(lam) Q
  whose active rank shrinks during training under a cubic budget, steered by
  smoothed importance scores, with an orthogonality penalty on P and Q;
* activation rescaling (``ia3``): learned per-dimension vectors multiplying
  the Q projection output, the K projection output, and the attention output
  linear, initialized to ones;
* prompt tuning (``prompt``): trainable virtual token vectors prepended to
  the embedded sequence (excluded from pooling).

``count_trainable`` gives the closed-form budget for each method; the audit
table cross-checks it against direct enumeration of the adapter tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import AdapterHooks, EncoderConfig, EncoderWeights
from .errors import ConfigError

_VALID_TARGETS = ("q", "v")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # defaults to 2*rank
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("lora rank must be >= 1")
        _check_targets(self.targets)

    @property
    def scaling_alpha(self) -> float:
        return float(2 * self.rank if self.alpha is None else self.alpha)


@dataclass(frozen=True)
class AdaLoraConfig:
    r_init: int = 12
    r_target: int = 4
    t_init: int = 100
    t_final: int = 300
    gamma: float = 0.1
    beta: float = 0.85
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.r_target > self.r_init:
            raise ConfigError("r_target must not exceed r_init")
        if self.r_init < 1 or self.r_target < 0:
            raise ConfigError("adalora ranks must be positive")
        if self.t_init >= self.t_final:
            raise ConfigError("t_init must be smaller than t_final")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        _check_targets(self.targets)


@dataclass(frozen=True)
class Ia3Config:
    """The scaled points are fixed: Q output, K output, attention-out linear."""


@dataclass(frozen=True)
class PromptConfig:
    m: int = 10
    init: str = "vocab"  # "vocab" samples embedding rows, "normal" draws N(0, 0.02)

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("prompt length m must be >= 1")
        if self.init not in ("vocab", "normal"):
            raise ConfigError(f"unknown prompt init {self.init!r}")


def _check_targets(targets) -> None:
    if not targets:
        raise ConfigError("adapter target set must not be empty")
    bad = [t for t in targets if t not in _VALID_TARGETS]
    if bad:
        raise ConfigError(f"unsupported adapter targets {bad}; choose from {_VALID_TARGETS}")


METHOD_CONFIGS = {
    "lora": LoraConfig,
    "adalora": AdaLoraConfig,
    "ia3": Ia3Config,
    "prompt": PromptConfig,
}


class Adapter(AdapterHooks):
    """Common bookkeeping for all adapter kinds."""

    method = "none"

    def __init__(self, config, encoder_config: EncoderConfig):
        self.config = config
        self.encoder_config = encoder_config
        self.params: dict[str, Parameter] = {}

    def _put(self, name: str, data, trainable: bool = True) -> Parameter:
        p = Parameter(data, trainable=trainable, id=name)
        self.params[name] = p
        return p

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def num_params(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ConfigError(f"adapter state mismatch for keys {sorted(missing)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if arr.shape != p.tensor.data.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.tensor.data.shape}")
            p.tensor.data = np.asarray(arr, dtype=np.float64)

    def extra_header(self) -> dict:
        """Non-tensor state persisted in the checkpoint header."""
        return {}

    def load_extra_header(self, extra: dict) -> None:
        pass


def lora_forward(x: Tensor, w: Tensor, a: Tensor, b: Tensor, alpha: float, r: int) -> Tensor:
    """y = x @ (W + (alpha/r) * B @ A); gradients reach A and B only when W is frozen."""
    base = ad.matmul(x, w)
    delta = ad.matmul(ad.matmul(x, b), a)
    return ad.add(base, ad.scale(delta, alpha / r))


def merge_lora(w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, r: int) -> np.ndarray:
    """Fold a trained low-rank update into the dense weight."""
    return w + (alpha / r) * (b @ a)


class LoraAdapter(Adapter):
    method = "lora"

    def __init__(self, config: LoraConfig, encoder_config: EncoderConfig, seed: int = 0):
        super().__init__(config, encoder_config)
        d = encoder_config.d_model
        if config.rank > d:
            raise ConfigError(f"lora rank {config.rank} exceeds d_model {d}")
        rng = np.random.default_rng(seed)
        r = config.rank
        for layer in range(encoder_config.layers):
            for t in config.targets:
                self._put(f"layers.{layer}.{t}.lora_a", rng.normal(0.0, 0.02, (r, d)))
                self._put(f"layers.{layer}.{t}.lora_b", np.zeros((d, r)))
        self.merged = False

    def project(self, layer: int, name: str, x: Tensor, w: Tensor) -> Tensor:
        if name not in self.config.targets:
            return ad.matmul(x, w)
        a = self.params[f"layers.{layer}.{name}.lora_a"].tensor
        b = self.params[f"layers.{layer}.{name}.lora_b"].tensor
        return lora_forward(x, w, a, b, self.config.scaling_alpha, self.config.rank)


def merge_lora_into(weights: EncoderWeights, adapter: LoraAdapter) -> EncoderWeights:
    """Return new encoder weights with the adapter folded in (single-shot)."""
    if adapter.merged:
        raise ConfigError("lora adapter already merged; merging is single-shot")
    merged = weights.copy()
    cfg = adapter.config
    for layer in range(weights.config.layers):
        for t in cfg.targets:
            w = merged.params[f"layers.{layer}.attn.w{t}"]
            a = adapter.params[f"layers.{layer}.{t}.lora_a"].tensor.data
            b = adapter.params[f"layers.{layer}.{t}.lora_b"].tensor.data
            w.tensor.data = merge_lora(w.tensor.data, a, b, cfg.scaling_alpha, cfg.rank)
    adapter.merged = True
    return merged


class AdaLoraAdapter(Adapter):
    method = "adalora"

    def __init__(self, config: AdaLoraConfig, encoder_config: EncoderConfig, seed: int = 0):
        super().__init__(config, encoder_config)
        d = encoder_config.d_model
        if config.r_init > d:
            raise ConfigError(f"adalora r_init {config.r_init} exceeds d_model {d}")
        rng = np.random.default_rng(seed)
        r = config.r_init
        self._keys: list[str] = []
        self.masks: dict[str, np.ndarray] = {}
        self.sensitivity: dict[str, np.ndarray] = {}
        for layer in range(encoder_config.layers):
            for t in config.targets:
                key = f"layers.{layer}.{t}"
                self._keys.append(key)
                self._put(f"{key}.adalora_p", rng.normal(0.0, 0.02, (d, r)))
                self._put(f"{key}.adalora_lam", np.zeros(r))
                self._put(f"{key}.adalora_q", rng.normal(0.0, 0.02, (r, d)))
                self.masks[key] = np.ones(r)
                self.sensitivity[key] = np.zeros(r)

    def project(self, layer: int, name: str, x: Tensor, w: Tensor) -> Tensor:
        if name not in self.config.targets:
            return ad.matmul(x, w)
        key = f"layers.{layer}.{name}"
        p = self.params[f"{key}.adalora_p"].tensor
        lam = self.params[f"{key}.adalora_lam"].tensor
        q = self.params[f"{key}.adalora_q"].tensor
        gated = ad.mul(lam, ad.constant(self.masks[key]))
        delta = ad.matmul(ad.mul(ad.matmul(x, p), gated), q)
        return ad.add(ad.matmul(x, w), delta)

    def orthogonality_penalty(self) -> Tensor:
        """gamma * sum over targets of ||P^T P - I||_F^2 + ||Q Q^T - I||_F^2."""
        eye = ad.constant(np.eye(self.config.r_init))
        total: Tensor | None = None
        for key in self._keys:
            p = self.params[f"{key}.adalora_p"].tensor
            q = self.params[f"{key}.adalora_q"].tensor
            dp = ad.matmul(ad.transpose_last2(p), p) - eye
            dq = ad.matmul(q, ad.transpose_last2(q)) - eye
            term = ad.add(ad.mul(dp, dp).sum(), ad.mul(dq, dq).sum())
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, self.config.gamma)

    def budget(self, t: int) -> float:
        """Per-matrix average rank budget, interpolating cubically."""
        cfg = self.config
        if t <= cfg.t_init:
            return float(cfg.r_init)
        if t >= cfg.t_final:
            return float(cfg.r_target)
        frac = (t - cfg.t_init) / (cfg.t_final - cfg.t_init)
        return cfg.r_target + (cfg.r_init - cfg.r_target) * (1.0 - frac) ** 3

    def active_rank(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def step(self, t: int, grads: dict[str, np.ndarray] | None = None) -> None:
        """Refresh smoothed sensitivities and re-allocate the rank budget at step t."""
        cfg = self.config
        for key in self._keys:
            lam = self.params[f"{key}.adalora_lam"]
            g = grads.get(f"{key}.adalora_lam") if grads is not None else lam.tensor.grad
            if g is None:
                g = np.zeros_like(lam.tensor.data)
            importance = np.abs(lam.tensor.data * g)
            self.sensitivity[key] = cfg.beta * self.sensitivity[key] + (1.0 - cfg.beta) * importance
        if t <= cfg.t_init:
            for key in self._keys:
                self.masks[key][:] = 1.0
            return
        total_budget = int(round(self.budget(t) * len(self._keys)))
        ranked = sorted(
            ((key, i) for key in self._keys for i in range(cfg.r_init)),
            key=lambda ki: (-self.sensitivity[ki[0]][ki[1]], ki[0], ki[1]),
        )
        keep = set(ranked[:total_budget])
        for key in self._keys:
            for i in range(cfg.r_init):
                self.masks[key][i] = 1.0 if (key, i) in keep else 0.0

    def extra_header(self) -> dict:
        return {
            "masks": {key: [int(v) for v in m] for key, m in self.masks.items()},
        }

    def load_extra_header(self, extra: dict) -> None:
        masks = extra.get("masks", {})
        if set(masks) != set(self.masks):
            raise ConfigError("adalora mask keys do not match the configured targets")
        for key, values in masks.items():
            self.masks[key] = np.asarray(values, dtype=np.float64)


def adalora_step(adapter: AdaLoraAdapter, t: int, grads: dict[str, np.ndarray] | None = None) -> AdaLoraAdapter:
    """Advance the rank-allocation schedule; reads lambda gradients if not given."""
    adapter.step(t, grads)
    return adapter


class Ia3Adapter(Adapter):
    method = "ia3"

    _POINTS = ("q", "k", "out")

    def __init__(self, config: Ia3Config, encoder_config: EncoderConfig, seed: int = 0):
        super().__init__(config, encoder_config)
        d = encoder_config.d_model
        for layer in range(encoder_config.layers):
            for point in self._POINTS:
                self._put(f"layers.{layer}.ia3_{point}", np.ones(d))

    def scale(self, layer: int, point: str, t: Tensor) -> Tensor:
        return ad.mul(t, self.params[f"layers.{layer}.ia3_{point}"].tensor)


def ia3_forward(activations: Tensor, vector: Tensor) -> Tensor:
    """Elementwise rescaling of an activation block by a learned vector."""
    return ad.mul(activations, vector)


class PromptAdapter(Adapter):
    method = "prompt"

    def __init__(
        self,
        config: PromptConfig,
        encoder_config: EncoderConfig,
        seed: int = 0,
        tok_emb: np.ndarray | None = None,
    ):
        super().__init__(config, encoder_config)
        if config.m + 1 > encoder_config.max_len:
            raise ConfigError(
                f"prompt length {config.m} leaves no room within max_len {encoder_config.max_len}"
            )
        rng = np.random.default_rng(seed)
        d = encoder_config.d_model
        if config.init == "vocab" and tok_emb is not None:
            self.init_ids = rng.integers(0, encoder_config.vocab_size, size=config.m)
            init = tok_emb[self.init_ids].copy()
        else:
            self.init_ids = None
            init = rng.normal(0.0, 0.02, (config.m, d))
        self._put("prompt", init)

    def prepend(self, x: Tensor, attn_mask: np.ndarray, pool_mask: np.ndarray):
        return prompt_forward(x, self.params["prompt"].tensor, attn_mask, pool_mask)


def prompt_forward(
    x: Tensor,
    prompt: Tensor,
    attn_mask: np.ndarray,
    pool_mask: np.ndarray | None = None,
):
    """Prepend m virtual vectors to an embedded (N,T,d) batch.

    The attention mask gains m ones per row; the pooling mask gains m zeros
    so pooling never sees the prompt positions.  An empty prompt is the
    identity.
    """
    if pool_mask is None:
        pool_mask = attn_mask
    m = prompt.shape[0]
    if m == 0:
        return x, attn_mask, pool_mask
    n = x.shape[0]
    expanded = ad.expand_batch(prompt, n)
    out = ad.concat([expanded, x], axis=1)
    ones = np.ones((n, m))
    zeros = np.zeros((n, m))
    return out, np.concatenate([ones, attn_mask], axis=1), np.concatenate([zeros, pool_mask], axis=1)


def build_adapter(
    method: str,
    config,
    encoder_config: EncoderConfig,
    seed: int = 0,
    tok_emb: np.ndarray | None = None,
) -> Adapter:
    """Construct adapter state from configuration alone (no base weights needed)."""
    if method == "lora":
        return LoraAdapter(config, encoder_config, seed)
    if method == "adalora":
        return AdaLoraAdapter(config, encoder_config, seed)
    if method == "ia3":
        return Ia3Adapter(config, encoder_config, seed)
    if method == "prompt":
        return PromptAdapter(config, encoder_config, seed, tok_emb=tok_emb)
    raise ConfigError(f"unknown adapter method {method!r}")


def attach(method: str, config, encoder: EncoderWeights, seed: int = 0) -> Adapter:
    """Build the adapter for a live encoder and freeze every base weight."""
    adapter = build_adapter(
        method, config, encoder.config, seed,
        tok_emb=encoder.tensor("tok_emb").data,
    )
    encoder.freeze()
    return adapter


def count_trainable(method: str, config, encoder_config: EncoderConfig) -> int:
    """Closed-form trainable-parameter budget for one method."""
    d, layers = encoder_config.d_model, encoder_config.layers
    if method == "lora":
        return layers * len(config.targets) * 2 * d * config.rank
    if method == "adalora":
        return layers * len(config.targets) * config.r_init * (2 * d + 1)
    if method == "ia3":
        return layers * 3 * d
    if method == "prompt":
        return config.m * d
    raise ConfigError(f"unknown adapter method {method!r}")


def default_config(method: str):
    if method not in METHOD_CONFIGS:
        raise ConfigError(f"unknown adapter method {method!r}")
    return METHOD_CONFIGS[method]()


def config_to_dict(config) -> dict:
    d = asdict(config)
    if "targets" in d:
        d["targets"] = list(d["targets"])
    return d


def config_from_dict(method: str, d: dict):
    cls = METHOD_CONFIGS.get(method)
    if cls is None:
        raise ConfigError(f"unknown adapter method {method!r}")
    d = dict(d)
    if "targets" in d:
        d["targets"] = tuple(d["targets"])
    return cls(**d)
