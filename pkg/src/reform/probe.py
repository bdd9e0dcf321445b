"""Hand-constructed 2-layer probe model with verifiable retrieval behavior.

The residual stream is split into bands: A = current-token code,
B = previous-token code, C = predicted-token code, plus a constant bias
channel. Layer 0 head 0 attends to the previous position (its key pairs
are pre-rotated by one step, so the positional kernel peaks exactly at
distance 1) and copies the attended token's A code into band B. Layer 1
head 0 matches the current token's A code against band B — a classic
induction step — and writes the successor's code into band C, which
lm_head reads. Token codes live in high-index rotary pairs whose
frequencies are astronomically small, so content matching is unaffected
by position as long as sequences stay within max_positions.

Consequences, all exercised by tests:
  * the value head (0, value, 0) emits token-identity embeddings, so
    similarity search finds planted spans exactly;
  * a dense or recomputed forward greedily copies whatever followed the
    last occurrence of the current token, i.e. the model answers
    key -> payload queries verbatim;
  * layer-1 head 1 is all zeros — a provably uninformative "bad" tap.

Copy fidelity needs the key and payload bytes to be pairwise distinct and
absent from the filler alphabet; make_probe_needle enforces that.
"""

from __future__ import annotations

import numpy as np

from .embeddings import HeadSpec
from .model import Model, ModelConfig, ModelWeights, weight_schema
from .tokenizer import VOCAB_SIZE

CODE_DIM = 128
POS_PAIRS = 16  # rotary pairs used by the previous-position kernel
HEAD_DIM = 2 * POS_PAIRS + CODE_DIM  # content lives in near-frozen pairs
D_MODEL = 3 * CODE_DIM + 1  # bands A, B, C + bias channel
_BAND_A = slice(0, CODE_DIM)
_BAND_B = slice(CODE_DIM, 2 * CODE_DIM)
_BAND_C = slice(2 * CODE_DIM, 3 * CODE_DIM)
_BIAS = 3 * CODE_DIM

PROBE_TAP = HeadSpec(0, "value", 0)
# all-zero projections: provably uninformative taps for ablations
PROBE_BAD_TAPS = [HeadSpec(1, "value", 1), HeadSpec(1, "key", 1),
                  HeadSpec(1, "query", 1), HeadSpec(0, "value", 1)]

_MARGIN = 30.0  # target logit gap fed to softmax at the attention winners


def probe_config(max_positions: int = 65536) -> ModelConfig:
    # theta = 10^80 makes pair p rotate at 10^-p rad/step: pairs 0..15 form
    # the positional kernel, pairs >= 16 are frozen for content matching.
    return ModelConfig(n_layers=2, d_model=D_MODEL, n_q_heads=2, n_kv_heads=2,
                       head_dim=HEAD_DIM, d_ff=4, vocab_size=VOCAB_SIZE,
                       rope_theta=1e80, max_positions=max_positions)


def _positional_kernel_gap(theta: float, max_positions: int) -> float:
    """min over distances d != 1 of K(1) - K(d), K(d) = sum_p cos(theta_p (d-1))."""
    freqs = np.power(theta, -2.0 * np.arange(POS_PAIRS) / HEAD_DIM)
    d = np.arange(0, max_positions + 1, dtype=np.float64)
    kernel = np.cos(np.outer(d - 1.0, freqs)).sum(axis=1)
    best = kernel[1]
    kernel[1] = -np.inf
    return float(best - kernel.max())


def build_copy_probe(seed: int = 0, max_positions: int = 65536) -> Model:
    config = probe_config(max_positions)
    rng = np.random.default_rng(seed)
    codes = rng.normal(size=(VOCAB_SIZE, CODE_DIM))
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)
    codes = codes.astype(np.float32)

    coherence = float(np.abs(codes @ codes.T - np.eye(VOCAB_SIZE)).max())
    assert coherence < 0.55, f"token codes too correlated ({coherence:.3f})"

    gap = _positional_kernel_gap(config.rope_theta, max_positions)
    assert gap > 0.02, f"positional kernel too flat ({gap:.4f})"
    scale = np.sqrt(config.head_dim)  # attention divides scores by this
    bias_gain = D_MODEL / 2.0  # squared rmsnorm gain at layer 0 (|h|^2 = 2)
    gamma = np.sqrt(_MARGIN * scale / (bias_gain * gap))
    # layer-1 rmsnorm gain is ~ d/3; code coherence bounds the distractor dot
    beta = np.sqrt(_MARGIN * scale / ((D_MODEL / 3.0) * (1.0 - coherence) * 0.8))

    tensors = {name: np.zeros(shape, dtype=np.float32)
               for name, shape in weight_schema(config).items()}
    for name in ("layers.0.attn_norm", "layers.0.mlp_norm",
                 "layers.1.attn_norm", "layers.1.mlp_norm", "final_norm"):
        tensors[name][:] = 1.0

    emb = tensors["tok_emb"]
    emb[:, _BAND_A] = codes
    emb[:, _BIAS] = 1.0

    freqs = np.power(config.rope_theta, -2.0 * np.arange(POS_PAIRS) / HEAD_DIM)
    wq0, wk0 = tensors["layers.0.wq"], tensors["layers.0.wk"]
    for p in range(POS_PAIRS):
        wq0[2 * p, _BIAS] = gamma  # head 0 rows occupy 0..head_dim-1
        wk0[2 * p, _BIAS] = gamma * np.cos(freqs[p])  # key pair pre-rotated by
        wk0[2 * p + 1, _BIAS] = gamma * np.sin(freqs[p])  # one position
    wv0 = tensors["layers.0.wv"]
    wv0[0:CODE_DIM, _BAND_A] = np.eye(CODE_DIM)
    wo0 = tensors["layers.0.wo"]
    wo0[_BAND_B, 0:CODE_DIM] = np.sqrt(2.0 / D_MODEL) * np.eye(CODE_DIM)

    content = slice(2 * POS_PAIRS, HEAD_DIM)
    wq1, wk1 = tensors["layers.1.wq"], tensors["layers.1.wk"]
    wq1[content, _BAND_A] = beta * np.eye(CODE_DIM)
    wk1[content, _BAND_B] = beta * np.eye(CODE_DIM)
    wv1 = tensors["layers.1.wv"]
    wv1[0:CODE_DIM, _BAND_A] = np.eye(CODE_DIM)
    wo1 = tensors["layers.1.wo"]
    wo1[_BAND_C, 0:CODE_DIM] = np.sqrt(3.0 / D_MODEL) * np.eye(CODE_DIM)

    tensors["lm_head"][:, _BAND_C] = codes
    return Model(config, ModelWeights(tensors))


_NEEDLE_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


def make_probe_needle(seed: int, key_len: int = 8,
                      payload_len: int = 8) -> tuple[str, str, str]:
    """(needle_text, question_text, payload_text) with pairwise-distinct bytes.

    The filler corpus is lowercase, so these uppercase/digit bytes occur
    nowhere else; the question is exactly the key and the needle is the key
    immediately followed by the payload.
    """
    if key_len + payload_len > len(_NEEDLE_ALPHABET):
        raise ValueError("key and payload cannot exceed the distinct alphabet")
    perm = np.random.default_rng(seed).permutation(len(_NEEDLE_ALPHABET))
    chars = [_NEEDLE_ALPHABET[i] for i in perm[:key_len + payload_len]]
    key = "".join(chars[:key_len])
    payload = "".join(chars[key_len:])
    return key + payload, key, payload
