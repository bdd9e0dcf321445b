"""Standalone RFWT writer implementing the engine's on-disk contract.

Little-endian: magic "RFWT", version u32=1, config block (n_layers,
d_model, n_q_heads, n_kv_heads, head_dim, d_ff, vocab_size, max_positions
as u64; rope_theta, rms_eps as f64), tensor count u32; per tensor: name
length u16, UTF-8 name, dtype u8 (0=f32, 1=f16), rank u8, dims u64 each,
zero padding to the next 8-byte file offset, row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RFWT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}


@dataclass(frozen=True)
class EngineConfig:
    n_layers: int
    d_model: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_positions: int
    rope_theta: float
    rms_eps: float


def schema_names(config: EngineConfig) -> list[str]:
    names = ["tok_emb"]
    for i in range(config.n_layers):
        names += [f"layers.{i}.{part}" for part in
                  ("attn_norm", "wq", "wk", "wv", "wo",
                   "mlp_norm", "w_gate", "w_up", "w_down")]
    return names + ["final_norm", "lm_head"]


def write_rfwt(path, config: EngineConfig, tensors: dict[str, np.ndarray]) -> None:
    names = schema_names(config)
    missing = [n for n in names if n not in tensors]
    if missing:
        raise ValueError(f"schema tensors missing: {missing}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<8Q", config.n_layers, config.d_model,
                             config.n_q_heads, config.n_kv_heads, config.head_dim,
                             config.d_ff, config.vocab_size, config.max_positions))
        fh.write(struct.pack("<2d", config.rope_theta, config.rms_eps))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = np.ascontiguousarray(tensors[name])
            code = _DTYPE_CODES[tensor.dtype]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            fh.write(b"\x00" * (-fh.tell() % 8))
            fh.write(tensor.tobytes())
