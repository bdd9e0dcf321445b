"""Budgeted per-layer key/value cache with pluggable eviction.

Entries keep their pre-rotary keys plus two position IDs: the original
token index in the full input and the assigned position actually fed to
rotary encoding. Eviction is uniform across heads within a layer (scores
summed over heads) and independent across layers, so one position map per
layer stays well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, InputError


class EvictionPolicy(str, Enum):
    H2O = "h2o"
    STREAMING_LLM = "streamingllm"
    TOVA = "tova"


@dataclass
class CacheEntry:
    """One cached token position (debug/introspection view)."""

    key: np.ndarray  # [n_kv_heads, head_dim], pre-rotary
    value: np.ndarray  # [n_kv_heads, head_dim]
    original_position: int
    assigned_position: int
    cum_score: float


class LayerKVCache:
    """Single layer's cache. budget=None means unbounded (no eviction)."""

    def __init__(self, n_kv_heads: int, head_dim: int, budget: int | None,
                 sink_len: int = 0, recent_len: int = 0):
        if budget is not None and budget < sink_len + recent_len:
            raise ConfigError(
                f"cache budget {budget} below sink {sink_len} + recent {recent_len}")
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.budget = budget
        self.sink_len = sink_len
        self.recent_len = recent_len
        self.keys = np.zeros((0, n_kv_heads, head_dim), dtype=np.float32)
        self.values = np.zeros((0, n_kv_heads, head_dim), dtype=np.float32)
        self.original_positions = np.zeros(0, dtype=np.int64)
        self.assigned_positions = np.zeros(0, dtype=np.int64)
        self.cum_scores = np.zeros(0, dtype=np.float32)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, keys: np.ndarray, values: np.ndarray,
               original_positions: np.ndarray) -> None:
        """Append a chunk's pre-rotary K/V with zero cumulative scores.

        New entries take assigned positions continuing after the current
        tail, so a freshly appended chunk is rotated at cache_len..cache_len+n.
        """
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        pos = np.asarray(original_positions, dtype=np.int64)
        if keys.shape != (len(pos), self.n_kv_heads, self.head_dim):
            raise InputError(f"key block shape {keys.shape} does not match cache schema")
        if values.shape != keys.shape:
            raise InputError("value block shape differs from key block")
        if len(pos) == 0:
            return
        if np.any(np.diff(pos) <= 0):
            raise InputError("original positions must be strictly increasing")
        if len(self) and pos[0] <= self.original_positions[-1]:
            raise InputError(
                f"appended position {int(pos[0])} not beyond cache tail "
                f"{int(self.original_positions[-1])}")
        start = len(self)
        self.keys = np.concatenate([self.keys, keys])
        self.values = np.concatenate([self.values, values])
        self.original_positions = np.concatenate([self.original_positions, pos])
        self.assigned_positions = np.concatenate(
            [self.assigned_positions, start + np.arange(len(pos), dtype=np.int64)])
        self.cum_scores = np.concatenate(
            [self.cum_scores, np.zeros(len(pos), dtype=np.float32)])

    def accumulate_scores(self, observer_attention: np.ndarray) -> None:
        obs = np.asarray(observer_attention, dtype=np.float32)
        if obs.shape != (len(self),):
            raise InputError(
                f"observer vector length {obs.shape} does not match {len(self)} entries")
        if np.any(obs < 0):
            raise InputError("attention mass must be nonnegative")
        self.cum_scores = self.cum_scores + obs

    def compress(self, policy: EvictionPolicy,
                 last_chunk_attention: np.ndarray | None = None) -> np.ndarray:
        """Evict down to budget; returns evicted original positions.

        Sink and recent spans always survive. The middle is ranked by the
        policy signal; ties go to the larger original position (recency).
        """
        n = len(self)
        if self.budget is None or n <= self.budget:
            return np.zeros(0, dtype=np.int64)
        if self.budget < self.sink_len + self.recent_len:
            raise ConfigError(
                f"cache budget {self.budget} below sink {self.sink_len} "
                f"+ recent {self.recent_len}")
        sink = min(self.sink_len, n)
        recent = min(self.recent_len, n - sink)
        mid_lo, mid_hi = sink, n - recent
        n_mid = mid_hi - mid_lo
        keep_mid = self.budget - sink - recent

        if policy is EvictionPolicy.H2O:
            signal = self.cum_scores[mid_lo:mid_hi].astype(np.float64)
        elif policy is EvictionPolicy.STREAMING_LLM:
            signal = self.original_positions[mid_lo:mid_hi].astype(np.float64)
        elif policy is EvictionPolicy.TOVA:
            if last_chunk_attention is None:
                raise InputError("TOVA compression needs the final-token attention row")
            row = np.asarray(last_chunk_attention, dtype=np.float64)
            if row.shape != (n,):
                raise InputError(
                    f"final-token attention length {row.shape} does not match {n} entries")
            signal = row[mid_lo:mid_hi]
        else:  # pragma: no cover - enum is closed
            raise ConfigError(f"unknown eviction policy {policy}")

        # Stable top-k with recency tie-break: sort by (-signal, -position).
        order = np.lexsort((-self.original_positions[mid_lo:mid_hi], -signal))
        keep_rel = np.sort(order[:keep_mid]) + mid_lo
        keep = np.concatenate([np.arange(sink), keep_rel, np.arange(mid_hi, n)])
        drop_rel = np.sort(order[keep_mid:]) + mid_lo
        evicted = self.original_positions[drop_rel].copy()

        self.keys = self.keys[keep]
        self.values = self.values[keep]
        self.original_positions = self.original_positions[keep]
        self.assigned_positions = self.assigned_positions[keep]
        self.cum_scores = self.cum_scores[keep]
        return evicted

    def reassign_positions(self) -> None:
        """Renumber assigned positions 0..n-1; original positions untouched."""
        self.assigned_positions = np.arange(len(self), dtype=np.int64)

    def entries(self) -> list[CacheEntry]:
        return [
            CacheEntry(self.keys[i], self.values[i],
                       int(self.original_positions[i]),
                       int(self.assigned_positions[i]),
                       float(self.cum_scores[i]))
            for i in range(len(self))
        ]

    def dump(self) -> str:
        """Text table of (original, assigned, cum_score) for test goldens."""
        lines = ["original\tassigned\tcum_score"]
        for i in range(len(self)):
            lines.append(f"{int(self.original_positions[i])}\t"
                         f"{int(self.assigned_positions[i])}\t"
                         f"{self.cum_scores[i]:.6g}")
        return "\n".join(lines) + "\n"


def new_cache_set(n_layers: int, n_kv_heads: int, head_dim: int,
                  budget: int | None, sink_len: int = 0,
                  recent_len: int = 0) -> list[LayerKVCache]:
    return [LayerKVCache(n_kv_heads, head_dim, budget, sink_len, recent_len)
            for _ in range(n_layers)]
