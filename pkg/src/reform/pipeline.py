"""End-to-end compress-gather-recompute pipeline.

Prefill splits the input into a context and a trailing query, forwards
context chunks (query last) through the lower layers onto budgeted caches
with per-chunk eviction and position reassignment, and collects combined
context embeddings for every token. The query embeddings then rank context
tokens; the selected subsequence is re-forwarded through all layers with
fresh consecutive positions onto an unbounded cache, which decoding uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import embeddings as emb
from . import retrieval
from .embeddings import EmbeddingStore, HeadSpec
from .errors import ConfigError, SplitError
from .kvcache import EvictionPolicy
from .model import Model, decode_token, forward_chunk
from .tokenizer import BYTE_VOCAB, EOS, SEP


@dataclass(frozen=True)
class QuerySplit:
    """How to separate the trailing query from the context.

    kind="suffix": the last ``value`` tokens are the query.
    kind="separator": the query starts at the last occurrence of token
    ``value`` (the separator stays with the query).
    """

    kind: str
    value: int

    def __post_init__(self):
        if self.kind not in ("suffix", "separator"):
            raise ConfigError(f"unknown query split rule {self.kind!r}")
        if self.value < 0:
            raise ConfigError("query split value must be nonnegative")

    def __str__(self) -> str:
        return f"{'sep' if self.kind == 'separator' else 'suffix'}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "QuerySplit":
        text = text.strip()
        if text == "sep":
            return cls("separator", SEP)
        kind, _, value = text.partition(":")
        if kind == "sep":
            return cls("separator", int(value))
        if kind == "suffix":
            return cls("suffix", int(value))
        raise ConfigError(f"bad query_split {text!r} (want suffix:<n> or sep[:<id>])")


@dataclass
class PipelineConfig:
    chunk_size: int = 512
    cache_budget: int = 512
    sink_len: int = 16
    recent_len: int = 16
    eviction: EvictionPolicy = EvictionPolicy.H2O
    selected_heads: list[HeadSpec] = field(default_factory=list)
    recomputation_budget: int = 128
    query_split: QuerySplit = QuerySplit("separator", SEP)
    neighbor_window: int = 8
    observer_window: int = 16
    embed_precision: str = "f16"

    @property
    def exit_layer(self) -> int:
        """Topmost tapped layer + 1; upper layers are skipped during prefill."""
        return emb.exit_layer_for(self.selected_heads)

    def validate(self, model_config) -> None:
        if not self.selected_heads:
            raise ConfigError("selected_heads must name at least one tap")
        for spec in self.selected_heads:
            spec.validate(model_config)
            if spec.projection not in ("query", "key", "value"):
                raise ConfigError(f"pipeline heads must be query/key/value taps, got {spec}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if self.cache_budget < self.sink_len + self.recent_len:
            raise ConfigError(
                f"cache_budget {self.cache_budget} below sink {self.sink_len} "
                f"+ recent {self.recent_len}")
        if self.neighbor_window < 0 or self.observer_window < 0:
            raise ConfigError("windows must be nonnegative")
        if self.cache_budget + self.chunk_size > model_config.max_positions:
            raise ConfigError(
                f"cache_budget + chunk_size = {self.cache_budget + self.chunk_size} "
                f"exceeds max_positions {model_config.max_positions}")
        if self.recomputation_budget > model_config.max_positions:
            raise ConfigError("recomputation_budget exceeds max_positions")


@dataclass
class WorkStats:
    """Deterministic work and memory counters (no timings)."""

    layer_executions: int = 0  # (token, layer) pairs forwarded
    attention_score_ops: int = 0  # sum of query_rows * cache_len per layer
    peak_cache_entries: list[int] = field(default_factory=list)  # per layer
    embedding_store_bytes: int = 0
    recomputed_tokens: int = 0
    decode_steps: int = 0


@dataclass
class PrefillResult:
    caches: list  # recomputed full-depth caches, one per layer
    selection: retrieval.SelectionSet
    stats: WorkStats
    next_logits: np.ndarray  # logits after the final query token
    scores: retrieval.SignificanceScores


def split_query(tokens: np.ndarray, rule: QuerySplit) -> tuple[np.ndarray, np.ndarray]:
    """context ++ query == tokens, query nonempty."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise SplitError("cannot split an empty input")
    if rule.kind == "suffix":
        if rule.value < 1 or rule.value >= len(tokens):
            raise SplitError(
                f"suffix length {rule.value} invalid for input of {len(tokens)} tokens")
        cut = len(tokens) - rule.value
    else:
        hits = np.flatnonzero(tokens == rule.value)
        if len(hits) == 0:
            raise SplitError(f"separator token {rule.value} not present in input")
        cut = int(hits[-1])
        if cut == len(tokens) - 1 and len(tokens) == 1:
            raise SplitError("input is a lone separator")
    return tokens[:cut], tokens[cut:]


def reform_prefill(model: Model, tokens: np.ndarray, cfg: PipelineConfig) -> PrefillResult:
    """Compress-gather-recompute prefill; see module docstring."""
    mc = model.config
    cfg.validate(mc)
    tokens = np.asarray(tokens, dtype=np.int64)
    context, query = split_query(tokens, cfg.query_split)
    exit_layer = cfg.exit_layer

    chunks = [context[i:i + cfg.chunk_size] for i in range(0, len(context), cfg.chunk_size)]
    chunks.append(query)

    caches = model.new_caches(cfg.cache_budget, cfg.sink_len, cfg.recent_len)
    store = EmbeddingStore(cfg.selected_heads, mc.head_dim, cfg.embed_precision)
    stats = WorkStats(peak_cache_entries=[0] * mc.n_layers)

    pos = 0
    for chunk in chunks:
        res = forward_chunk(model, chunk, caches, exit_layer, taps=cfg.selected_heads,
                            observer_window=cfg.observer_window,
                            original_positions=pos + np.arange(len(chunk), dtype=np.int64))
        stats.layer_executions += res.layer_executions
        stats.attention_score_ops += res.attention_score_ops
        # Embeddings are saved before eviction, so compression never drops them.
        store.append_tokens(emb.combine(emb.extract(res.tapped, cfg.selected_heads)))
        for layer in range(exit_layer):
            cache = caches[layer]
            stats.peak_cache_entries[layer] = max(stats.peak_cache_entries[layer], len(cache))
            cache.accumulate_scores(res.attention[layer].observer)
            cache.compress(cfg.eviction, res.attention[layer].final_row)
            cache.reassign_positions()
        pos += len(chunk)

    vectors = store.vectors()
    context_len = len(context)
    sig = retrieval.score(vectors[context_len:], vectors[:context_len],
                          valid_query_mask=query < BYTE_VOCAB)
    sig = retrieval.smooth_max(sig, cfg.neighbor_window)
    selection = retrieval.select(sig, cfg.recomputation_budget, cfg.sink_len,
                                 cfg.recent_len, len(tokens))
    gathered = retrieval.gather(tokens, selection)

    recomputed = model.new_caches(None)
    res = forward_chunk(model, gathered, recomputed, mc.n_layers,
                        original_positions=selection.indices)
    stats.layer_executions += res.layer_executions
    stats.attention_score_ops += res.attention_score_ops
    for layer, cache in enumerate(recomputed):
        stats.peak_cache_entries[layer] = max(stats.peak_cache_entries[layer], len(cache))
    stats.embedding_store_bytes = store.nbytes
    stats.recomputed_tokens = len(gathered)
    return PrefillResult(caches=recomputed, selection=selection, stats=stats,
                         next_logits=res.logits[-1], scores=sig)


def generate(model: Model, prefill: PrefillResult, max_new_tokens: int,
             eos_id: int = EOS) -> np.ndarray:
    """Greedy decode from the recomputed cache; stops at eos or the limit.

    Every generated token (eos included) is forwarded so it lands in the
    cache with a consecutive position; decode_steps counts those forwards.
    """
    out: list[int] = []
    logits = prefill.next_logits
    for _ in range(max_new_tokens):
        tok = int(np.argmax(logits))
        out.append(tok)
        logits = decode_token(model, prefill.caches, tok)
        prefill.stats.decode_steps += 1
        prefill.stats.layer_executions += model.config.n_layers
        prefill.stats.attention_score_ops += sum(len(c) for c in prefill.caches)
        if tok == eos_id:
            break
    for layer, cache in enumerate(prefill.caches):
        prefill.stats.peak_cache_entries[layer] = max(
            prefill.stats.peak_cache_entries[layer], len(cache))
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Config file I/O: flat "key = value" text, '#' comments, lists comma-split.

_CONFIG_KEYS = ("chunk_size", "cache_budget", "sink_len", "recent_len", "eviction",
                "selected_heads", "recomputation_budget", "query_split",
                "neighbor_window", "observer_window", "embed_precision")


def config_to_text(cfg: PipelineConfig) -> str:
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(cfg, key)
        if key == "selected_heads":
            value = ", ".join(str(s) for s in value)
        elif key == "eviction":
            value = value.value
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base if base is not None else PipelineConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in _CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: expected '<key> = <value>', got {raw!r}")
        updates[key] = _parse_config_value(key, value)
    return replace(cfg, **updates)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def _parse_config_value(key: str, value: str):
    try:
        if key == "eviction":
            return EvictionPolicy(value.lower())
        if key == "selected_heads":
            return [HeadSpec.parse(part) for part in value.split(",") if part.strip()]
        if key == "query_split":
            return QuerySplit.parse(value)
        if key == "embed_precision":
            return value
        return int(value)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
