"""Benchmark harness: method runners, NIAH grids, ablations, work reports.

Every run is a pure function of (model, tokens, config, seed); the work
counters are exact deterministic proxies for compute and memory, not
timings. Grid cells may run on a thread pool; per-cell seeds make the
assembly order-independent.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import headfinder, probe
from .embeddings import HeadSpec
from .errors import ConfigError, UsageError
from .kvcache import EvictionPolicy
from .model import Model, decode_token, forward_chunk
from .pipeline import PipelineConfig, PrefillResult, WorkStats, generate, reform_prefill
from .tokenizer import EOS, ByteTokenizer

METHODS = ("reform", "dense", "truncation", "h2o", "streamingllm", "tova")
_POLICY_METHODS = {"h2o": EvictionPolicy.H2O,
                   "streamingllm": EvictionPolicy.STREAMING_LLM,
                   "tova": EvictionPolicy.TOVA}
_TOKENIZER = ByteTokenizer()


def run_method(model: Model, tokens: np.ndarray, method: str, cfg: PipelineConfig,
               max_new_tokens: int, eos_id: int = EOS) -> tuple[np.ndarray, WorkStats]:
    """Generate greedily under one long-context handling method."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if method == "reform":
        prefill = reform_prefill(model, tokens, cfg)
        out = generate(model, prefill, max_new_tokens, eos_id)
        return out, prefill.stats
    if method == "dense":
        return _run_dense(model, tokens, max_new_tokens, eos_id)
    if method == "truncation":
        kept = truncate_middle(tokens, cfg.cache_budget)
        out, stats = _run_dense(model, kept, max_new_tokens, eos_id)
        return out, stats
    if method in _POLICY_METHODS:
        return _run_recurrent(model, tokens, cfg, _POLICY_METHODS[method],
                              max_new_tokens, eos_id)
    raise UsageError(f"unknown method {method!r} (have {', '.join(METHODS)})")


def truncate_middle(tokens: np.ndarray, budget: int) -> np.ndarray:
    """Drop the middle of the input down to budget tokens."""
    if len(tokens) <= budget:
        return tokens
    front = budget // 2
    return np.concatenate([tokens[:front], tokens[len(tokens) - (budget - front):]])


def _run_dense(model, tokens, max_new_tokens, eos_id):
    caches = model.new_caches(None)
    stats = WorkStats(peak_cache_entries=[0] * model.config.n_layers)
    res = forward_chunk(model, tokens, caches, model.config.n_layers)
    stats.layer_executions += res.layer_executions
    stats.attention_score_ops += res.attention_score_ops
    out = _greedy(model, caches, res.logits[-1], max_new_tokens, eos_id, stats)
    stats.peak_cache_entries = [len(c) for c in caches]
    return out, stats


def _run_recurrent(model, tokens, cfg, policy, max_new_tokens, eos_id):
    """Full-depth chunked prefill with per-chunk eviction, then decode."""
    mc = model.config
    caches = model.new_caches(cfg.cache_budget, cfg.sink_len, cfg.recent_len)
    stats = WorkStats(peak_cache_entries=[0] * mc.n_layers)
    pos = 0
    for start in range(0, len(tokens), cfg.chunk_size):
        chunk = tokens[start:start + cfg.chunk_size]
        res = forward_chunk(model, chunk, caches, mc.n_layers,
                            observer_window=cfg.observer_window,
                            original_positions=pos + np.arange(len(chunk), dtype=np.int64))
        stats.layer_executions += res.layer_executions
        stats.attention_score_ops += res.attention_score_ops
        for layer in range(mc.n_layers):
            cache = caches[layer]
            stats.peak_cache_entries[layer] = max(stats.peak_cache_entries[layer], len(cache))
            cache.accumulate_scores(res.attention[layer].observer)
            cache.compress(policy, res.attention[layer].final_row)
            cache.reassign_positions()
        pos += len(chunk)
        last_logits = res.logits[-1]
    out = _greedy(model, caches, last_logits, max_new_tokens, eos_id, stats)
    return out, stats


def _greedy(model, caches, logits, max_new_tokens, eos_id, stats):
    out = []
    for _ in range(max_new_tokens):
        tok = int(np.argmax(logits))
        out.append(tok)
        logits = decode_token(model, caches, tok)
        stats.decode_steps += 1
        stats.layer_executions += model.config.n_layers
        stats.attention_score_ops += sum(len(c) for c in caches)
        if tok == eos_id:
            break
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Work reports

@dataclass
class WorkReport:
    method: str
    layer_executions: int
    attention_score_ops: int
    peak_cache_entries: int
    embedding_store_bytes: int
    recomputed_tokens: int
    decode_steps: int

    @classmethod
    def from_stats(cls, method: str, stats: WorkStats) -> "WorkReport":
        return cls(method=method,
                   layer_executions=stats.layer_executions,
                   attention_score_ops=stats.attention_score_ops,
                   peak_cache_entries=max(stats.peak_cache_entries, default=0),
                   embedding_store_bytes=stats.embedding_store_bytes,
                   recomputed_tokens=stats.recomputed_tokens,
                   decode_steps=stats.decode_steps)

    def to_sidecar(self) -> str:
        lines = [f"method = {self.method}"]
        for name in ("layer_executions", "attention_score_ops", "peak_cache_entries",
                     "embedding_store_bytes", "recomputed_tokens", "decode_steps"):
            lines.append(f"{name} = {getattr(self, name)}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Needle-in-a-haystack grid

@dataclass
class NiahCell:
    length: int
    depth: float
    recall: float
    samples: int


@dataclass
class NiahGridResult:
    method: str
    lengths: list[int]
    depths: list[float]
    cells: list[NiahCell]
    samples_per_cell: int
    config_snapshot: str

    def recall_matrix(self) -> np.ndarray:
        mat = np.zeros((len(self.lengths), len(self.depths)))
        for cell in self.cells:
            mat[self.lengths.index(cell.length), self.depths.index(cell.depth)] = cell.recall
        return mat

    def to_table(self) -> str:
        header = "length" + "".join(f"\tdepth {d:g}%" for d in self.depths)
        lines = [f"# method = {self.method}", header]
        mat = self.recall_matrix()
        for i, length in enumerate(self.lengths):
            lines.append(str(length) + "".join(f"\t{mat[i, j]:.3f}"
                                               for j in range(len(self.depths))))
        return "\n".join(lines) + "\n"

    def to_sidecar(self) -> str:
        lines = [f"method = {self.method}",
                 "lengths = " + ", ".join(str(v) for v in self.lengths),
                 "depths = " + ", ".join(f"{v:g}" for v in self.depths),
                 f"samples = {self.samples_per_cell}"]
        for cell in self.cells:
            lines.append(f"cell {cell.length} {cell.depth:g} = {cell.recall:.6f}")
        lines.extend("config." + line for line in self.config_snapshot.splitlines())
        return "\n".join(lines) + "\n"


def make_niah_tokens(length: int, depth: float, seed: int,
                     corpus: str | None = None) -> tuple[np.ndarray, np.ndarray, str]:
    """(tokens, gold_mask, payload) for one NIAH sample of total ``length``."""
    needle, question, payload = probe.make_probe_needle(seed)
    filler_len = length - len(needle) - len(question) - 1
    if filler_len < 1:
        raise ConfigError(f"NIAH length {length} too short for needle and question")
    if corpus is None:
        corpus = headfinder.synthetic_corpus(seed, filler_len + 64)
    dataset = headfinder.gen_niah(corpus, needle, depth, filler_len,
                                  question, payload, seed=seed)
    sample = dataset.samples[0]
    return sample.tokens, sample.gold_mask, payload


def _cell_seed(seed: int, length: int, depth: float, sample: int) -> int:
    return (seed * 1000003 + length * 101 + int(depth * 4) * 13 + sample) % (2**31)


def niah_grid(model: Model, cfg: PipelineConfig, method: str, lengths, depths,
              n_samples: int, seed: int, corpus: str | None = None,
              max_new_tokens: int = 16, jobs: int = 1) -> NiahGridResult:
    """Recall = fraction of samples whose output contains the payload text."""
    lengths = sorted(int(v) for v in lengths)
    depths = sorted(float(v) for v in depths)

    def run_cell(args):
        length, depth = args
        hits = 0
        for s in range(n_samples):
            tokens, _, payload = make_niah_tokens(length, depth,
                                                  _cell_seed(seed, length, depth, s), corpus)
            out, _ = run_method(model, tokens, method, cfg, max_new_tokens)
            if payload in _TOKENIZER.decode(out):
                hits += 1
        return NiahCell(length=length, depth=depth, recall=hits / n_samples,
                        samples=n_samples)

    grid = [(length, depth) for length in lengths for depth in depths]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run_cell, grid))
    else:
        cells = [run_cell(args) for args in grid]
    from .pipeline import config_to_text
    return NiahGridResult(method=method, lengths=lengths, depths=depths, cells=cells,
                          samples_per_cell=n_samples, config_snapshot=config_to_text(cfg))


def selection_recall(model: Model, tokens: np.ndarray, cfg: PipelineConfig,
                     gold_mask: np.ndarray) -> tuple[float, PrefillResult]:
    """Fraction of gold token positions present in the REFORM selection."""
    prefill = reform_prefill(model, tokens, cfg)
    gold = np.flatnonzero(gold_mask)
    hit = np.isin(gold, prefill.selection.indices).sum()
    return float(hit) / max(len(gold), 1), prefill


def truncation_selection_recall(input_len: int, budget: int, gold_mask: np.ndarray) -> float:
    """Share of gold positions a middle-dropping truncation would keep."""
    kept = truncate_middle(np.arange(input_len), budget)
    gold = np.flatnonzero(gold_mask)
    return float(np.isin(gold, kept).sum()) / max(len(gold), 1)


# ---------------------------------------------------------------------------
# Ablations: head sets x eviction policies

@dataclass
class AblationRow:
    head_set: str
    policy: str
    recall: float
    heads: list[HeadSpec] = field(default_factory=list)


def random_head_set(config, seed: int, n_heads: int = 4) -> list[HeadSpec]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_heads):
        projection = ("query", "key", "value")[int(rng.integers(3))]
        n_heads_avail = config.n_q_heads if projection == "query" else config.n_kv_heads
        out.append(HeadSpec(int(rng.integers(config.n_layers)), projection,
                            int(rng.integers(n_heads_avail))))
    return out


def ablate(model: Model, cfg: PipelineConfig, head_sets: dict[str, list[HeadSpec]],
           policies: list[EvictionPolicy], lengths, depths, n_samples: int,
           seed: int, max_new_tokens: int = 16, jobs: int = 1) -> list[AblationRow]:
    rows = []
    for name, heads in head_sets.items():
        for policy in policies:
            run_cfg = replace(cfg, selected_heads=list(heads), eviction=policy)
            grid = niah_grid(model, run_cfg, "reform", lengths, depths,
                             n_samples, seed, max_new_tokens=max_new_tokens, jobs=jobs)
            recall = float(np.mean([cell.recall for cell in grid.cells]))
            rows.append(AblationRow(head_set=name, policy=policy.value,
                                    recall=recall, heads=list(heads)))
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    lines = ["head_set\tpolicy\trecall\theads"]
    for row in rows:
        heads = ", ".join(str(h) for h in row.heads)
        lines.append(f"{row.head_set}\t{row.policy}\t{row.recall:.3f}\t{heads}")
    return "\n".join(lines) + "\n"
