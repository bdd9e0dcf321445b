"""Synthetic labeled datasets and head evaluation by Mean Normalized Rank.

Datasets plant labeled spans (key-value sentences, needles, or QA
documents) inside filler text with the question appended at the end.
Candidate (layer, projection, head) taps are scored by running the same
compressive chunked prefill the pipeline uses, scoring context tokens
against the question tokens, mean-pooling, and ranking the gold tokens.
Lower MNR is better.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import retrieval
from .embeddings import HeadSpec
from .errors import DataError, InputError, SelectionError
from .kvcache import EvictionPolicy
from .model import Model, forward_chunk
from .tokenizer import BYTE_VOCAB, SEP, ByteTokenizer

_TOKENIZER = ByteTokenizer()

_LEXICON = (
    "the of and to in is was for on that with as his they at be this from have or "
    "by one had not but what all were when we there can an your which their said if "
    "do will each about how up out them then she many some so these would other into "
    "more her two like him see time could no make than first been its who now people "
    "my made over did down only way find use may water long little very after words "
    "called just where most know get through back much before go good new write our "
    "used me man too any day same right look think also around another came come work "
    "three word must because does part even place well such here take why things help "
    "put years different away again off went old number great tell men say small every "
    "found still between name should home big give air line set own under read last "
    "never us left end along while might next sound below saw something thought both "
    "few those always looked show large often together asked house world going want "
    "school important until form food keep children feet land side without boy once "
    "animal life enough took four head above kind began almost live page got earth "
    "need far hand high year mother light country father let night picture being "
    "study second soon story since white ever paper hard near sentence better best "
    "across during today however sure knew try told young sun thing whole hear "
    "example heard several change answer room sea against top turned learn point "
    "city play toward five himself usually money seen car morning given order red "
).split()


def synthetic_corpus(seed: int, n_bytes: int) -> str:
    """Deterministic lowercase word salad of at least n_bytes characters."""
    rng = np.random.default_rng(seed)
    words = []
    size = -1  # join inserts len(words) - 1 separators
    while size < n_bytes:
        word = _LEXICON[int(rng.integers(len(_LEXICON)))]
        words.append(word)
        size += len(word) + 1
    return " ".join(words)


@dataclass
class PlantedSample:
    tokens: np.ndarray
    gold_mask: np.ndarray  # bool per token, True on planted span(s)
    question_span: tuple[int, int]  # [start, end) at the end of the stream
    needle_payload: str  # expected answer text
    # which question tokens may drive similarity search; None = all
    # non-special tokens. Mirrors dropping specials and boilerplate prefixes.
    question_mask: np.ndarray | None = None


@dataclass
class PlantedDataset:
    name: str
    kind: str  # "pattern" | "qa" | "niah"
    samples: list[PlantedSample]
    template: str = ""
    seed: int = 0
    target_len: int = 0


KV_TEMPLATE = "The value corresponding to the id {key} is {value}."
_KEY_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


def random_ascii_id(rng: np.random.Generator, length: int = 10) -> str:
    return "".join(_KEY_ALPHABET[i] for i in rng.integers(len(_KEY_ALPHABET), size=length))


def _assemble(filler_tokens: np.ndarray, inserts: list[tuple[int, np.ndarray, bool]],
              question_tokens: np.ndarray,
              question_focus: str | None = None) -> PlantedSample:
    """Insert token spans at filler offsets (stable order), append the question.

    question_focus restricts similarity search to occurrences of that
    substring inside the question (the discriminative part, e.g. the key).
    """
    inserts = sorted(inserts, key=lambda item: item[0])
    parts, marks, prev = [], [], 0
    for offset, span, is_gold in inserts:
        parts.append(filler_tokens[prev:offset])
        marks.append(np.zeros(offset - prev, dtype=bool))
        parts.append(span)
        marks.append(np.full(len(span), is_gold))
        prev = offset
    parts.append(filler_tokens[prev:])
    marks.append(np.zeros(len(filler_tokens) - prev, dtype=bool))
    context = np.concatenate(parts)
    gold = np.concatenate(marks)
    qstart = len(context)
    tokens = np.concatenate([context, [SEP], question_tokens])
    gold_mask = np.concatenate([gold, np.zeros(1 + len(question_tokens), dtype=bool)])
    qmask = None
    if question_focus is not None:
        span = np.concatenate([[SEP], question_tokens])
        qmask = _occurrence_mask(span, _TOKENIZER.encode(question_focus))
    return PlantedSample(tokens=tokens.astype(np.int64), gold_mask=gold_mask,
                         question_span=(qstart, len(tokens)), needle_payload="",
                         question_mask=qmask)


def _occurrence_mask(haystack: np.ndarray, needle: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(haystack), dtype=bool)
    for i in range(len(haystack) - len(needle) + 1):
        if np.array_equal(haystack[i:i + len(needle)], needle):
            mask[i:i + len(needle)] = True
    return mask


def gen_kv_dataset(corpus: str, n_pairs: int, target_len: int, seed: int,
                   n_samples: int = 1) -> PlantedDataset:
    """Key-value pattern matching: planted template sentences, one asked for."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        pairs = [(random_ascii_id(rng), random_ascii_id(rng)) for _ in range(n_pairs)]
        sentences = [_TOKENIZER.encode(" " + KV_TEMPLATE.format(key=k, value=v) + " ")
                     for k, v in pairs]
        filler_len = target_len - sum(len(s) for s in sentences)
        if filler_len < n_pairs:
            raise DataError(f"target_len {target_len} too small for {n_pairs} planted pairs")
        filler = _corpus_tokens(corpus, filler_len)
        asked = int(rng.integers(n_pairs))
        offsets = np.sort(rng.integers(0, filler_len + 1, size=n_pairs))
        inserts = [(int(offsets[i]), sentences[i], i == asked) for i in range(n_pairs)]
        question = _TOKENIZER.encode(
            f"The value corresponding to the id {pairs[asked][0]} is")
        sample = _assemble(filler, inserts, question, question_focus=pairs[asked][0])
        sample.needle_payload = pairs[asked][1]
        samples.append(sample)
    return PlantedDataset(name=f"kv-{seed}", kind="pattern", samples=samples,
                          template=KV_TEMPLATE, seed=seed, target_len=target_len)


def gen_niah(corpus: str, needle: str, depth_percent: float, target_len: int,
             question: str, payload: str, seed: int = 0) -> PlantedDataset:
    """Single needle at floor(depth% of the filler length), question appended."""
    if not 0 <= depth_percent <= 100:
        raise InputError(f"depth {depth_percent} outside 0..100")
    filler = _corpus_tokens(corpus, target_len, seed=seed)
    needle_toks = _TOKENIZER.encode(needle)
    offset = int(np.floor(depth_percent / 100.0 * len(filler)))
    sample = _assemble(filler, [(offset, needle_toks, True)], _TOKENIZER.encode(question))
    sample.needle_payload = payload
    return PlantedDataset(name=f"niah-d{depth_percent:g}", kind="niah", samples=[sample],
                          seed=seed, target_len=target_len)


def gen_qa_dataset(corpus: str, entries: list[tuple], target_len: int,
                   seed: int) -> PlantedDataset:
    """Planted-document QA: each entry's gold documents land at random offsets.

    Entries are (docs, question, answer) or (docs, question, answer, focus)
    where focus narrows similarity search to that substring of the question.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for entry in entries:
        docs, question, answer = entry[:3]
        focus = entry[3] if len(entry) > 3 else None
        doc_toks = [_TOKENIZER.encode(" " + d + " ") for d in docs]
        filler_len = target_len - sum(len(d) for d in doc_toks)
        if filler_len < len(docs):
            raise DataError(f"target_len {target_len} too small for the planted documents")
        filler = _corpus_tokens(corpus, filler_len, seed=int(rng.integers(2**31)))
        offsets = np.sort(rng.integers(0, filler_len + 1, size=len(docs)))
        inserts = [(int(offsets[i]), doc_toks[i], True) for i in range(len(doc_toks))]
        sample = _assemble(filler, inserts, _TOKENIZER.encode(question),
                           question_focus=focus)
        sample.needle_payload = answer
        samples.append(sample)
    return PlantedDataset(name=f"qa-{seed}", kind="qa", samples=samples,
                          seed=seed, target_len=target_len)


def builtin_qa_entries(seed: int, n: int) -> list[tuple[list[str], str, str]]:
    """Self-contained two-hop facts for QA-style head scans."""
    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(n):
        agent, token, vault = (random_ascii_id(rng, 6) for _ in range(3))
        docs = [f"agent {agent} carries the token {token}",
                f"the token {token} opens the vault {vault}"]
        entries.append((docs, f"which vault does agent {agent} open", vault, agent))
    return entries


def _corpus_tokens(corpus: str, n: int, seed: int | None = None) -> np.ndarray:
    toks = _TOKENIZER.encode(corpus)
    if len(toks) < n:
        raise DataError(f"corpus has {len(toks)} tokens, need {n}")
    if seed is None:
        return toks[:n]
    start = int(np.random.default_rng(seed).integers(len(toks) - n + 1))
    return toks[start:start + n]


# ---------------------------------------------------------------------------
# Dataset spill format: one ASCII record per line,
# ids|gold_ranges|question_span|answer with ranges as start-end pairs.

def _ranges_of(mask: np.ndarray) -> str:
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.view(np.int8), [0]])))
    return ",".join(f"{edges[i]}-{edges[i + 1]}" for i in range(0, len(edges), 2))


def _mask_of(ranges: str, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if ranges:
        for text in ranges.split(","):
            lo, hi = (int(v) for v in text.split("-"))
            mask[lo:hi] = True
    return mask


def save_dataset(path, dataset: PlantedDataset) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for s in dataset.samples:
            ids = ",".join(str(int(t)) for t in s.tokens)
            span = f"{s.question_span[0]}-{s.question_span[1]}"
            record = f"{ids}|{_ranges_of(s.gold_mask)}|{span}|{s.needle_payload}"
            if s.question_mask is not None:
                record += f"|{_ranges_of(s.question_mask)}"
            fh.write(record + "\n")


def load_dataset(path, name: str = "loaded", kind: str = "qa") -> PlantedDataset:
    samples = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            ids, ranges, span, answer = parts[:4]
            tokens = np.asarray([int(t) for t in ids.split(",")], dtype=np.int64)
            gold = _mask_of(ranges, len(tokens))
            lo, hi = (int(v) for v in span.split("-"))
            qmask = _mask_of(parts[4], hi - lo) if len(parts) > 4 else None
            samples.append(PlantedSample(tokens, gold, (lo, hi), answer, qmask))
    return PlantedDataset(name=name, kind=kind, samples=samples)


# ---------------------------------------------------------------------------
# Mean Normalized Rank

def mnr(scores: np.ndarray, gold_mask: np.ndarray) -> float:
    """Average over gold tokens of rank/n, rank 1 = highest score.

    Tied scores share the average rank of their block, so the result is
    stable under permutation of equal scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gold_mask = np.asarray(gold_mask, dtype=bool)
    if scores.shape != gold_mask.shape or scores.ndim != 1:
        raise InputError("scores and gold mask must be 1-D and the same length")
    if not gold_mask.any():
        raise DataError("gold mask is empty")
    n = len(scores)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = (i + 1 + j) / 2.0  # mean of ranks i+1 .. j
        i = j
    return float(np.mean(ranks[gold_mask]) / n)


def smooth_mean(scores: np.ndarray, window: int = 20) -> np.ndarray:
    """Symmetric mean pooling clipped to the array bounds."""
    return retrieval.sliding_mean(scores, window)


# ---------------------------------------------------------------------------
# Candidate evaluation

@dataclass
class HeadEvalResult:
    spec: HeadSpec
    mnr: float
    dataset: str
    samples: int


def candidate_taps(spec: HeadSpec, config) -> list[HeadSpec]:
    """Concrete forward taps needed to score a candidate."""
    if spec.projection in ("query", "key", "value", "hidden"):
        return [spec]
    # attention: pre-rotary Q.K dot product summed over all query heads
    return ([HeadSpec(spec.layer, "query", h) for h in range(config.n_q_heads)]
            + [HeadSpec(spec.layer, "key", h) for h in range(config.n_kv_heads)])


def collect_states(model: Model, tokens: np.ndarray, taps: list[HeadSpec],
                   chunk_size: int, cache_budget: int, sink_len: int, recent_len: int,
                   eviction: EvictionPolicy = EvictionPolicy.H2O,
                   observer_window: int = 128) -> dict[HeadSpec, np.ndarray]:
    """Compressive chunked prefill that keeps the tapped states for all tokens."""
    exit_layer = 1 + max(s.layer for s in taps)
    caches = model.new_caches(cache_budget, sink_len, recent_len)
    collected: dict[HeadSpec, list[np.ndarray]] = {spec: [] for spec in taps}
    pos = 0
    tokens = np.asarray(tokens, dtype=np.int64)
    for start in range(0, len(tokens), chunk_size):
        chunk = tokens[start:start + chunk_size]
        res = forward_chunk(model, chunk, caches, exit_layer, taps=taps,
                            observer_window=observer_window,
                            original_positions=pos + np.arange(len(chunk), dtype=np.int64))
        for spec in taps:
            collected[spec].append(res.tapped[spec])
        for layer in range(exit_layer):
            caches[layer].accumulate_scores(res.attention[layer].observer)
            caches[layer].compress(eviction, res.attention[layer].final_row)
            caches[layer].reassign_positions()
        pos += len(chunk)
    return {spec: np.concatenate(mats) for spec, mats in collected.items()}


def score_candidate(spec: HeadSpec, states: dict[HeadSpec, np.ndarray],
                    sample: PlantedSample, config) -> np.ndarray:
    """Raw per-context-token scores for one sample (before mean pooling)."""
    qstart, qend = sample.question_span
    valid = sample.tokens[qstart:qend] < BYTE_VOCAB
    if sample.question_mask is not None:
        valid &= sample.question_mask
    if spec.projection == "attention":
        group = config.n_q_heads // config.n_kv_heads
        total = None
        for h in range(config.n_q_heads):
            q = states[HeadSpec(spec.layer, "query", h)]
            k = states[HeadSpec(spec.layer, "key", h // group)]
            part = k[:qstart] @ q[qstart:qend][valid].T  # [context, valid_query]
            total = part if total is None else total + part
        return total.max(axis=1)
    mat = states[spec]
    sig = retrieval.score(mat[qstart:qend], mat[:qstart], valid)
    return sig.scores


def eval_head_mnr(model: Model, dataset: PlantedDataset, candidate: HeadSpec,
                  chunk_size: int = 512, cache_budget: int = 512, sink_len: int = 16,
                  recent_len: int = 16, eviction: EvictionPolicy = EvictionPolicy.H2O,
                  mean_window: int = 20, observer_window: int = 128) -> HeadEvalResult:
    candidate.validate(model.config)
    taps = candidate_taps(candidate, model.config)
    values = []
    for sample in dataset.samples:
        states = collect_states(model, sample.tokens, taps, chunk_size, cache_budget,
                                sink_len, recent_len, eviction, observer_window)
        raw = score_candidate(candidate, states, sample, model.config)
        smoothed = smooth_mean(raw, mean_window)
        qstart = sample.question_span[0]
        values.append(mnr(smoothed, sample.gold_mask[:qstart]))
    return HeadEvalResult(spec=candidate, mnr=float(np.mean(values)),
                          dataset=dataset.name, samples=len(dataset.samples))


def all_candidates(config) -> list[HeadSpec]:
    """Every scannable tap: per layer, all Q/K/V heads plus hidden and attention."""
    out = []
    for layer in range(config.n_layers):
        out.extend(HeadSpec(layer, "query", h) for h in range(config.n_q_heads))
        out.extend(HeadSpec(layer, "key", h) for h in range(config.n_kv_heads))
        out.extend(HeadSpec(layer, "value", h) for h in range(config.n_kv_heads))
        out.append(HeadSpec(layer, "hidden", 0))
        out.append(HeadSpec(layer, "attention", 0))
    return out


def select_heads(results_by_dataset: dict[str, list[HeadEvalResult]], n_layers: int,
                 n_per_dataset: int = 2, depth_cap: float = 0.7) -> list[HeadSpec]:
    """Lowest-MNR storable specs per dataset, deduplicated with backfill.

    Candidates from "pattern" datasets are restricted to layers strictly
    below depth_cap * n_layers; hidden/attention rows are evaluation-only
    and never selected.
    """
    chosen: list[HeadSpec] = []
    for kind, results in results_by_dataset.items():
        pool = [r for r in results if r.spec.projection in ("query", "key", "value")]
        if kind == "pattern":
            pool = [r for r in pool if r.spec.layer < depth_cap * n_layers]
        pool.sort(key=lambda r: (r.mnr, r.spec.layer, r.spec.projection, r.spec.head))
        picked = 0
        for r in pool:
            if picked == n_per_dataset:
                break
            if r.spec not in chosen:
                chosen.append(r.spec)
                picked += 1
        if picked < n_per_dataset:
            raise SelectionError(
                f"dataset {kind!r} offers only {picked} distinct candidates "
                f"under the depth cap, need {n_per_dataset}")
    return chosen


def format_report(results: list[HeadEvalResult]) -> str:
    """Tab-separated rows sorted ascending by MNR within each dataset."""
    lines = ["layer\tprojection\thead\tmnr\tdataset"]
    by_dataset: dict[str, list[HeadEvalResult]] = {}
    for r in results:
        by_dataset.setdefault(r.dataset, []).append(r)
    for dataset in by_dataset:
        for r in sorted(by_dataset[dataset],
                        key=lambda r: (r.mnr, r.spec.layer, r.spec.projection, r.spec.head)):
            lines.append(f"{r.spec.layer}\t{r.spec.projection}\t{r.spec.head}"
                         f"\t{r.mnr:.6f}\t{r.dataset}")
    return "\n".join(lines) + "\n"
