"""Minimal decoder-only transformer forward pass.

Pre-norm RMSNorm, grouped-query attention with rotary positions, gated-SiLU
MLP. The forward is cache-conditioned and chunked: each call attends
causally within the chunk and fully onto prior cache entries, appends the
chunk's pre-rotary K/V to the per-layer caches, and can stop early at an
exit layer. Q/K/V taps are captured post-projection, pre-rotary, so tapped
states are independent of position assignment.

All accumulation is float32; softmax subtracts the row max.

RoPE convention: interleaved pairs (2i, 2i+1), rotated by
pos * theta^(-2i/head_dim) with out_even = e*cos - o*sin,
out_odd = e*sin + o*cos.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import HeadSpec, TappedStates
from .errors import ConfigError, DataError, InputError, PositionError
from .kvcache import LayerKVCache, new_cache_set
from .tokenizer import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int = VOCAB_SIZE
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    max_positions: int = 8192

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_q_heads", "n_kv_heads",
                     "head_dim", "d_ff", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_q_heads {self.n_q_heads} not a multiple of n_kv_heads {self.n_kv_heads}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.rope_theta <= 0 or self.rms_eps <= 0:
            raise ConfigError("rope_theta and rms_eps must be positive")


def weight_schema(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes, in serialization order. Projections are
    stored [out_features, in_features]."""
    d, hq, hkv, hd = config.d_model, config.n_q_heads, config.n_kv_heads, config.head_dim
    schema: dict[str, tuple[int, ...]] = {"tok_emb": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        schema[p + "attn_norm"] = (d,)
        schema[p + "wq"] = (hq * hd, d)
        schema[p + "wk"] = (hkv * hd, d)
        schema[p + "wv"] = (hkv * hd, d)
        schema[p + "wo"] = (d, hq * hd)
        schema[p + "mlp_norm"] = (d,)
        schema[p + "w_gate"] = (config.d_ff, d)
        schema[p + "w_up"] = (config.d_ff, d)
        schema[p + "w_down"] = (d, config.d_ff)
    schema["final_norm"] = (d,)
    schema["lm_head"] = (config.vocab_size, d)
    return schema


_NORM_SUFFIXES = ("attn_norm", "mlp_norm", "final_norm")


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray]

    def validate(self, config: ModelConfig) -> None:
        schema = weight_schema(config)
        for name, shape in schema.items():
            if name not in self.tensors:
                raise ConfigError(f"missing tensor {name!r}")
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(
                    f"tensor {name!r} has shape {self.tensors[name].shape}, schema wants {shape}")
        extra = set(self.tensors) - set(schema)
        if extra:
            raise ConfigError(f"unexpected tensors {sorted(extra)}")
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise DataError(f"tensor {name!r} contains non-finite values")


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic random weights for the seed.

    2-D tensors are zero-mean normal with std 1/sqrt(fan_in);
    norm gain vectors start at ones (a zero-mean gain collapses the
    signal and every downstream tolerance with it).
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in weight_schema(config).items():
        if name.endswith(_NORM_SUFFIXES):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            std = 1.0 / np.sqrt(shape[-1])
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelWeights(tensors)


class Model:
    """Immutable (config, weights) bundle; safe to share across threads."""

    def __init__(self, config: ModelConfig, weights: ModelWeights):
        weights.validate(config)
        self.config = config
        self.weights = weights
        # f16 checkpoints compute in f32
        self._w = {name: (t if t.dtype == np.float32 else t.astype(np.float32))
                   for name, t in weights.tensors.items()}

    @classmethod
    def random(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_random(config, seed))

    def new_caches(self, budget: int | None, sink_len: int = 0,
                   recent_len: int = 0) -> list[LayerKVCache]:
        return new_cache_set(self.config.n_layers, self.config.n_kv_heads,
                             self.config.head_dim, budget, sink_len, recent_len)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + eps)) * weight


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope_angles(positions: np.ndarray, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    exponents = -2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim
    freqs = np.power(float(theta), exponents)  # [head_dim/2]
    angles = positions.astype(np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rope(states: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate interleaved pairs of each row by pos * theta^(-2i/head_dim).

    ``states`` may be [n, head_dim] or [n, n_heads, head_dim]; positions
    index the first axis.
    """
    states = np.asarray(states, dtype=np.float32)
    positions = np.asarray(positions)
    head_dim = states.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigError(f"head_dim {head_dim} must be even for rotary pairs")
    if positions.ndim != 1 or positions.shape[0] != states.shape[0]:
        raise InputError("positions must be one per row")
    if np.any(positions < 0):
        raise InputError("positions must be nonnegative")
    cos, sin = _rope_angles(positions, head_dim, theta)
    if states.ndim == 3:
        cos, sin = cos[:, None, :], sin[:, None, :]
    even = states[..., 0::2]
    odd = states[..., 1::2]
    out = np.empty_like(states)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass
class AttentionMass:
    """Per-layer column sums of attention weights over all query heads.

    ``observer`` sums the final min(observer_window, chunk_len) chunk rows;
    ``final_row`` is just the last row (the TOVA signal). Both have one
    entry per cache position after the chunk was appended.
    """

    observer: np.ndarray
    final_row: np.ndarray


@dataclass
class ChunkResult:
    hidden: np.ndarray  # [chunk_len, d_model] after the last executed layer
    logits: np.ndarray | None  # [chunk_len, vocab], only at full depth
    tapped: TappedStates
    attention: list[AttentionMass]  # one per executed layer
    layer_executions: int  # (token, layer) pairs executed
    attention_score_ops: int  # sum over layers of chunk_len * total_keys


def forward_chunk(model: Model, tokens: np.ndarray, caches: list[LayerKVCache],
                  exit_layer: int, taps=(), observer_window: int = 128,
                  original_positions: np.ndarray | None = None) -> ChunkResult:
    """Run layers [0, exit_layer) on one chunk, appending K/V to the caches.

    Layers at or above exit_layer are not executed and their caches stay
    untouched. Logits are produced only when exit_layer == n_layers.
    """
    cfg = model.config
    w = model._w
    if not 0 <= exit_layer <= cfg.n_layers:
        raise ConfigError(f"exit layer {exit_layer} outside 0..{cfg.n_layers}")
    if len(caches) != cfg.n_layers:
        raise ConfigError(f"{len(caches)} caches for {cfg.n_layers} layers")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] < 1:
        raise InputError("chunk must be a nonempty 1-D token array")
    if np.any(tokens < 0) or np.any(tokens >= cfg.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= cfg.vocab_size)][0]
        raise InputError(f"token ID {int(bad)} outside vocabulary of {cfg.vocab_size}")
    taps = list(taps)
    for spec in taps:
        spec.validate(cfg)
        if spec.projection == "attention":
            raise ConfigError("attention taps are realized via query+key taps")
        if spec.layer >= exit_layer:
            raise ConfigError(f"tap {spec} lies at or above exit layer {exit_layer}")

    n = tokens.shape[0]
    group = cfg.n_q_heads // cfg.n_kv_heads
    kv_map = np.arange(cfg.n_q_heads) // group
    scale = 1.0 / np.sqrt(cfg.head_dim)

    h = w["tok_emb"][tokens]
    tapped = TappedStates()
    attention: list[AttentionMass] = []
    score_ops = 0

    for layer in range(exit_layer):
        cache = caches[layer]
        base = len(cache)
        positions = base + np.arange(n, dtype=np.int64)
        if positions[-1] >= cfg.max_positions:
            raise PositionError(
                f"position {int(positions[-1])} beyond max_positions {cfg.max_positions}")
        if original_positions is None:
            next_orig = int(cache.original_positions[-1]) + 1 if base else 0
            orig = next_orig + np.arange(n, dtype=np.int64)
        else:
            orig = np.asarray(original_positions, dtype=np.int64)

        p = f"layers.{layer}."
        x = rmsnorm(h, w[p + "attn_norm"], cfg.rms_eps)
        q = (x @ w[p + "wq"].T).reshape(n, cfg.n_q_heads, cfg.head_dim)
        k = (x @ w[p + "wk"].T).reshape(n, cfg.n_kv_heads, cfg.head_dim)
        v = (x @ w[p + "wv"].T).reshape(n, cfg.n_kv_heads, cfg.head_dim)

        for spec in taps:
            if spec.layer != layer or spec.projection not in ("query", "key", "value"):
                continue
            source = q if spec.projection == "query" else (k if spec.projection == "key" else v)
            tapped.states[spec] = source[:, spec.head, :].copy()

        q_rot = apply_rope(q, positions, cfg.rope_theta)
        if base:
            k_all = np.concatenate([cache.keys, k])
            v_all = np.concatenate([cache.values, v])
            key_pos = np.concatenate([cache.assigned_positions, positions])
        else:
            k_all, v_all, key_pos = k, v, positions
        k_rot = apply_rope(k_all, key_pos, cfg.rope_theta)
        total = base + n

        # [n_q, n, total] batched over query heads
        scores = (q_rot.transpose(1, 0, 2) @ k_rot[:, kv_map, :].transpose(1, 2, 0)) * scale
        if n > 1:
            row = np.arange(n)[:, None]
            col = np.arange(n)[None, :]
            scores[:, :, base:][:, col > row] = -np.inf  # future chunk keys
        probs = _softmax_rows(scores)
        score_ops += n * total

        window = min(observer_window, n)
        observer = probs[:, n - window:, :].sum(axis=(0, 1)) if window > 0 \
            else np.zeros(total, dtype=np.float32)
        final_row = probs[:, -1, :].sum(axis=0)
        attention.append(AttentionMass(observer.astype(np.float32),
                                       final_row.astype(np.float32)))

        ctx = probs @ v_all[:, kv_map, :].transpose(1, 0, 2)  # [n_q, n, head_dim]
        attn_out = ctx.transpose(1, 0, 2).reshape(n, cfg.n_q_heads * cfg.head_dim)
        h = h + attn_out @ w[p + "wo"].T

        x2 = rmsnorm(h, w[p + "mlp_norm"], cfg.rms_eps)
        h = h + (_silu(x2 @ w[p + "w_gate"].T) * (x2 @ w[p + "w_up"].T)) @ w[p + "w_down"].T

        for spec in taps:
            if spec.layer == layer and spec.projection == "hidden":
                tapped.states[spec] = h.copy()

        cache.append(k, v, orig)

    logits = None
    if exit_layer == cfg.n_layers:
        logits = rmsnorm(h, w["final_norm"], cfg.rms_eps) @ w["lm_head"].T

    return ChunkResult(hidden=h, logits=logits, tapped=tapped, attention=attention,
                       layer_executions=n * exit_layer, attention_score_ops=score_ops)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def decode_token(model: Model, caches: list[LayerKVCache], last_token: int) -> np.ndarray:
    """Single-token full-depth step; returns the next-token logits row."""
    for layer, cache in enumerate(caches):
        if len(cache) == 0:
            raise InputError(f"decode requires a nonempty cache at layer {layer}")
    res = forward_chunk(model, np.asarray([last_token], dtype=np.int64),
                        caches, model.config.n_layers)
    return res.logits[0]
