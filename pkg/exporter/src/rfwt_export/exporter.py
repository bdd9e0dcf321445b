"""Checkpoint conversion: Hugging Face decoder-only models to RFWT.

Supports the Llama/Mistral family: pre-norm RMSNorm, grouped-query
attention with rotary positions and no projection biases, gated-SiLU MLP.
The source stores rotary dimensions in half layout (dimension j pairs
with j + head_dim/2); the engine interleaves pairs, so q/k projection
rows are permuted per head (j -> 2j, j + head_dim/2 -> 2j + 1), which
reproduces the source attention exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rfwt_writer import EngineConfig, schema_names, write_rfwt


class UnsupportedArchitectureError(Exception):
    """Source checkpoint does not match the engine architecture."""

    def __init__(self, component: str):
        super().__init__(f"unsupported architecture: {component}")
        self.component = component


@dataclass
class ExportManifest:
    source: str
    dtype: str
    config: EngineConfig
    mapped: list[tuple[str, str, tuple[int, ...], str]] = field(default_factory=list)
    unmapped: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"source = {self.source}", f"dtype = {self.dtype}"]
        for name, value in vars(self.config).items():
            lines.append(f"engine_config.{name} = {value}")
        for src, dst, shape, digest in self.mapped:
            dims = "x".join(str(d) for d in shape)
            lines.append(f"map {src} -> {dst} [{dims}] sha256={digest}")
        for name in self.unmapped:
            lines.append(f"unmapped {name}")
        for note in self.notes:
            lines.append(f"note {note}")
        return "\n".join(lines) + "\n"


def _require(config, attr: str, component: str):
    value = getattr(config, attr, None)
    if value is None:
        raise UnsupportedArchitectureError(f"{component} (config has no {attr})")
    return value


def _rope_theta(config) -> float:
    """Rotary base across transformers versions: either a flat rope_theta
    attribute or a rope_parameters/rope_scaling dict; non-default rope
    types (linear/yarn/ntk scaling) are not representable in the engine."""
    params = getattr(config, "rope_parameters", None) or getattr(config, "rope_scaling", None)
    if isinstance(params, dict):
        rope_type = params.get("rope_type", params.get("type", "default"))
        if rope_type != "default":
            raise UnsupportedArchitectureError(f"position encoding (rope_type {rope_type!r})")
        if "rope_theta" in params:
            return float(params["rope_theta"])
    theta = getattr(config, "rope_theta", None)
    if theta is None:
        raise UnsupportedArchitectureError("rotary base (config has no rope_theta)")
    return float(theta)


def engine_config_from_source(config) -> EngineConfig:
    n_q = _require(config, "num_attention_heads", "attention heads")
    n_kv = getattr(config, "num_key_value_heads", None) or n_q
    d_model = _require(config, "hidden_size", "model width")
    head_dim = getattr(config, "head_dim", None) or d_model // n_q
    if head_dim % 2 != 0:
        raise UnsupportedArchitectureError(f"rotary head dimension (head_dim {head_dim} is odd)")
    return EngineConfig(
        n_layers=_require(config, "num_hidden_layers", "decoder layers"),
        d_model=d_model,
        n_q_heads=n_q,
        n_kv_heads=n_kv,
        head_dim=head_dim,
        d_ff=_require(config, "intermediate_size", "feed-forward width"),
        vocab_size=_require(config, "vocab_size", "vocabulary"),
        max_positions=_require(config, "max_position_embeddings", "position range"),
        rope_theta=_rope_theta(config),
        rms_eps=float(_require(config, "rms_norm_eps", "RMS normalization epsilon")),
    )


def _interleave_rows(block: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    """Per head, reorder rotary rows from half layout to interleaved pairs."""
    perm = np.empty(head_dim, dtype=np.int64)
    half = head_dim // 2
    perm[0::2] = np.arange(half)
    perm[1::2] = np.arange(half) + half
    return block.reshape(n_heads, head_dim, -1)[:, perm, :].reshape(block.shape)


_LAYER_MAP = (
    ("input_layernorm.weight", "attn_norm"),
    ("self_attn.q_proj.weight", "wq"),
    ("self_attn.k_proj.weight", "wk"),
    ("self_attn.v_proj.weight", "wv"),
    ("self_attn.o_proj.weight", "wo"),
    ("post_attention_layernorm.weight", "mlp_norm"),
    ("mlp.gate_proj.weight", "w_gate"),
    ("mlp.up_proj.weight", "w_up"),
    ("mlp.down_proj.weight", "w_down"),
)


def map_tensors(state_dict: dict, config: EngineConfig) -> tuple[dict[str, np.ndarray], list[str]]:
    """RFWT tensor map from a source state dict; returns (tensors, unmapped)."""
    for key in state_dict:
        if key.endswith((".q_proj.bias", ".k_proj.bias", ".v_proj.bias", ".o_proj.bias")):
            raise UnsupportedArchitectureError(f"attention projection bias ({key})")
    if "model.layers.0.self_attn.q_proj.weight" not in state_dict:
        raise UnsupportedArchitectureError(
            "attention projections (model.layers.*.self_attn.q_proj.weight not found)")

    def take(name: str) -> np.ndarray:
        if name not in state_dict:
            raise UnsupportedArchitectureError(f"missing tensor ({name})")
        return state_dict[name].float().numpy()

    used = set()

    def grab(name: str) -> np.ndarray:
        used.add(name)
        return take(name)

    tensors: dict[str, np.ndarray] = {"tok_emb": grab("model.embed_tokens.weight")}
    for i in range(config.n_layers):
        for src_part, dst_part in _LAYER_MAP:
            tensor = grab(f"model.layers.{i}.{src_part}")
            if dst_part == "wq":
                tensor = _interleave_rows(tensor, config.n_q_heads, config.head_dim)
            elif dst_part == "wk":
                tensor = _interleave_rows(tensor, config.n_kv_heads, config.head_dim)
            tensors[f"layers.{i}.{dst_part}"] = tensor
    tensors["final_norm"] = grab("model.norm.weight")
    if "lm_head.weight" in state_dict:
        tensors["lm_head"] = grab("lm_head.weight")
    else:  # tied embeddings
        tensors["lm_head"] = tensors["tok_emb"]
    unmapped = sorted(set(state_dict) - used)
    return tensors, unmapped


def export(source: str, out_path: str, dtype: str = "f32",
           vocab_path: str | None = None,
           manifest_path: str | None = None) -> ExportManifest:
    """Convert a local checkpoint directory (or model id) to an RFWT file."""
    import torch
    from transformers import AutoConfig, AutoModelForCausalLM

    if dtype not in ("f32", "f16"):
        raise ValueError(f"dtype must be f32 or f16, got {dtype!r}")
    source_config = AutoConfig.from_pretrained(source)
    config = engine_config_from_source(source_config)
    with torch.no_grad():
        model = AutoModelForCausalLM.from_pretrained(source)
        model = model.float().eval()
    tensors, unmapped = map_tensors(model.state_dict(), config)

    np_dtype = np.float32 if dtype == "f32" else np.float16
    tensors = {name: np.ascontiguousarray(t.astype(np_dtype)) for name, t in tensors.items()}
    write_rfwt(out_path, config, tensors)

    manifest = ExportManifest(source=str(source), dtype=dtype, config=config)
    reverse = _source_names(config)
    for name in schema_names(config):
        digest = hashlib.sha256(tensors[name].tobytes()).hexdigest()
        manifest.mapped.append((reverse[name], name, tuple(tensors[name].shape), digest))
    manifest.unmapped = unmapped
    if getattr(source_config, "sliding_window", None):
        manifest.notes.append(
            f"source uses sliding_window = {source_config.sliding_window}; "
            "the engine attends globally, so logits match only within the window")
    if getattr(source_config, "tie_word_embeddings", False):
        manifest.notes.append("lm_head tied to token embeddings")
    manifest.notes.append("q/k rotary rows interleaved per head (half -> pair layout)")

    if vocab_path is not None:
        n = _export_vocab(source, vocab_path, config.vocab_size)
        if n:
            manifest.notes.append(f"vocabulary of {n} tokens written")
        else:
            manifest.notes.append("no tokenizer found; vocabulary not written")
    if manifest_path is not None:
        Path(manifest_path).write_text(manifest.to_text(), encoding="utf-8")
    return manifest


def _source_names(config: EngineConfig) -> dict[str, str]:
    out = {"tok_emb": "model.embed_tokens.weight", "final_norm": "model.norm.weight",
           "lm_head": "lm_head.weight"}
    for i in range(config.n_layers):
        for src_part, dst_part in _LAYER_MAP:
            out[f"layers.{i}.{dst_part}"] = f"model.layers.{i}.{src_part}"
    return out


def _export_vocab(source: str, vocab_path: str, vocab_size: int) -> int:
    """One token string per line, newline/backslash escaped; gaps filled."""
    try:
        from transformers import AutoTokenizer
        tokenizer = AutoTokenizer.from_pretrained(source)
    except Exception:
        return 0
    by_id = {i: t for t, i in tokenizer.get_vocab().items()}
    tokens = [by_id.get(i, f"<unused:{i}>") for i in range(vocab_size)]
    with open(vocab_path, "w", encoding="utf-8") as fh:
        for tok in tokens:
            fh.write(tok.replace("\\", "\\\\").replace("\n", "\\n") + "\n")
    return len(tokens)
