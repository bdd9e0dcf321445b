"""Token-level significance scoring and budgeted selection.

Each context token is scored by its maximum cosine similarity against the
valid query tokens, max-pooled over a symmetric neighbor window for span
continuity, then the top-scoring positions are selected under a total
budget that includes the forced sink, recent, and query tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, QueryError, SchemaError


@dataclass
class SignificanceScores:
    scores: np.ndarray  # [context_len], cosine-based
    query_pooled: bool = True
    neighbor_window: int = 0

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class SelectionSet:
    indices: np.ndarray  # sorted ascending original positions
    budget: int
    sink_len: int
    recent_len: int

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, position: int) -> bool:
        i = np.searchsorted(self.indices, position)
        return i < len(self.indices) and self.indices[i] == position


def score(query_embs: np.ndarray, context_embs: np.ndarray,
          valid_query_mask: np.ndarray) -> SignificanceScores:
    """scores[i] = max over valid query tokens j of cosine(query_j, context_i)."""
    query_embs = np.asarray(query_embs, dtype=np.float32)
    context_embs = np.asarray(context_embs, dtype=np.float32)
    mask = np.asarray(valid_query_mask, dtype=bool)
    if query_embs.ndim != 2 or context_embs.ndim != 2 \
            or query_embs.shape[1] != context_embs.shape[1]:
        raise SchemaError(
            f"embedding dims differ: query {query_embs.shape} vs context {context_embs.shape}")
    if mask.shape != (query_embs.shape[0],):
        raise SchemaError("query mask length must match query token count")
    if not mask.any():
        raise QueryError("every query token is masked; nothing to search with")
    q = _unit_rows(query_embs[mask])
    c = _unit_rows(context_embs)
    sims = c @ q.T  # [context, valid_query]
    return SignificanceScores(scores=sims.max(axis=1).astype(np.float32))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def sliding_max(x: np.ndarray, window: int) -> np.ndarray:
    """out[i] = max of x over [i-window, i+window] clipped to bounds."""
    x = np.asarray(x)
    if window < 0:
        raise InputError("window must be nonnegative")
    n = len(x)
    if window == 0 or n == 0:
        return x.copy()
    pad = np.full(window, -np.inf, dtype=np.float64)
    padded = np.concatenate([pad, x.astype(np.float64), pad])
    view = np.lib.stride_tricks.sliding_window_view(padded, 2 * window + 1)
    return view.max(axis=1).astype(x.dtype)


def sliding_mean(x: np.ndarray, window: int) -> np.ndarray:
    """out[i] = mean of x over [i-window, i+window] clipped to bounds."""
    x = np.asarray(x)
    if window < 0:
        raise InputError("window must be nonnegative")
    n = len(x)
    if window == 0 or n == 0:
        return x.astype(np.float64)
    cs = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    idx = np.arange(n)
    lo = np.maximum(idx - window, 0)
    hi = np.minimum(idx + window, n - 1) + 1
    return (cs[hi] - cs[lo]) / (hi - lo)


def smooth_max(sig: SignificanceScores, window: int = 128) -> SignificanceScores:
    return SignificanceScores(scores=sliding_max(sig.scores, window),
                              query_pooled=sig.query_pooled,
                              neighbor_window=window)


def select(sig: SignificanceScores, total_budget: int, sink_len: int,
           recent_len: int, input_len: int) -> SelectionSet:
    """Pick sink + recent + query positions plus the top-scored context.

    Scores cover context positions [0, context_len); query positions are
    [context_len, input_len) and are always included. The budget counts
    the forced tokens. Score ties break toward the earlier position.
    """
    scores = np.asarray(sig.scores, dtype=np.float64)
    context_len = len(scores)
    if context_len > input_len:
        raise InputError(f"{context_len} scores for input of {input_len} tokens")

    forced = np.zeros(input_len, dtype=bool)
    forced[:min(sink_len, input_len)] = True
    if recent_len > 0:
        forced[max(input_len - recent_len, 0):] = True
    forced[context_len:] = True
    n_forced = int(forced.sum())
    if total_budget < n_forced:
        raise ConfigError(
            f"budget {total_budget} below the {n_forced} forced sink/recent/query tokens")

    free = np.flatnonzero(~forced[:context_len])
    n_take = min(total_budget - n_forced, len(free))
    if n_take > 0:
        # lexsort: primary descending score, secondary ascending position
        order = np.lexsort((free, -scores[free]))
        chosen = free[order[:n_take]]
    else:
        chosen = np.zeros(0, dtype=np.int64)
    indices = np.sort(np.concatenate([np.flatnonzero(forced), chosen]))
    return SelectionSet(indices=indices.astype(np.int64), budget=total_budget,
                        sink_len=sink_len, recent_len=recent_len)


def gather(tokens: np.ndarray, selection: SelectionSet) -> np.ndarray:
    """Tokens at the selected positions, in ascending original order."""
    tokens = np.asarray(tokens)
    if len(selection.indices) and selection.indices[-1] >= len(tokens):
        raise InputError(
            f"selection index {int(selection.indices[-1])} outside input of {len(tokens)}")
    return tokens[selection.indices]


def dump_scores(sig: SignificanceScores, selection: SelectionSet) -> str:
    """Tab-separated (position, score, selected?) for benchmark introspection."""
    lines = ["position\tscore\tselected"]
    for i, s in enumerate(sig.scores):
        lines.append(f"{i}\t{s:.6f}\t{1 if i in selection else 0}")
    return "\n".join(lines) + "\n"
