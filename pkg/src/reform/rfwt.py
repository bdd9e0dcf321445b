"""RFWT binary weight format.

Little-endian layout:

    magic  "RFWT" (4 bytes)
    version u32 = 1
    config block: n_layers, d_model, n_q_heads, n_kv_heads, head_dim,
                  d_ff, vocab_size, max_positions  (u64 each)
                  rope_theta, rms_eps               (f64 each)
    tensor count u32
    per tensor: name length u16, UTF-8 name, dtype u8 (0=f32, 1=f16),
                rank u8, dims u64 each, zero padding to the next 8-byte
                file offset, then the row-major payload.

Round-trips are byte-identical; f16 payloads stay f16 in the returned
ModelWeights (the Model wrapper upcasts for compute).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CorruptFileError, DataError, FormatError
from .model import ModelConfig, ModelWeights, weight_schema

MAGIC = b"RFWT"
VERSION = 1

_CONFIG_FIELDS = ("n_layers", "d_model", "n_q_heads", "n_kv_heads",
                  "head_dim", "d_ff", "vocab_size", "max_positions")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}


def save_weights(path, config: ModelConfig, weights: ModelWeights) -> None:
    names = list(weight_schema(config))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<8Q", *(getattr(config, f) for f in _CONFIG_FIELDS)))
        fh.write(struct.pack("<2d", config.rope_theta, config.rms_eps))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = weights.tensors[name]
            code = _DTYPE_CODES.get(tensor.dtype)
            if code is None:
                raise FormatError(f"tensor {name!r} has unserializable dtype {tensor.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            fh.write(b"\x00" * (-fh.tell() % 8))
            fh.write(np.ascontiguousarray(tensor).astype(_DTYPES[code]).tobytes())


def load_weights(path) -> tuple[ModelConfig, ModelWeights]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not an RFWT file (bad magic)")
    off = 4
    (version,), off = _unpack("<I", data, off)
    if version != VERSION:
        raise FormatError(f"unsupported RFWT version {version}")
    ints, off = _unpack("<8Q", data, off)
    (theta, eps), off = _unpack("<2d", data, off)
    try:
        config = ModelConfig(**dict(zip(_CONFIG_FIELDS, (int(v) for v in ints))),
                             rope_theta=theta, rms_eps=eps)
    except Exception as exc:
        raise FormatError(f"invalid config block: {exc}") from None
    (count,), off = _unpack("<I", data, off)

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,), off = _unpack("<H", data, off)
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (code, rank), off = _unpack("<BB", data, off)
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
        if rank > 8:
            raise CorruptFileError(f"tensor {name!r} declares rank {rank}")
        dims, off = _unpack(f"<{rank}Q", data, off)
        off += -off % 8
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        n_bytes = n_items * _DTYPES[code].itemsize
        if off + n_bytes > len(data):
            raise CorruptFileError(
                f"tensor {name!r} payload truncated: header promises {n_bytes} bytes")
        tensor = np.frombuffer(data, dtype=_DTYPES[code], count=n_items, offset=off)
        tensors[name] = tensor.reshape([int(d) for d in dims]).copy()
        off += n_bytes

    if off != len(data):
        raise CorruptFileError(f"{len(data) - off} trailing bytes after last tensor")
    weights = ModelWeights(tensors)
    schema = weight_schema(config)
    for name, shape in schema.items():
        if name not in tensors:
            raise FormatError(f"schema tensor {name!r} missing from file")
        if tuple(tensors[name].shape) != shape:
            raise CorruptFileError(
                f"tensor {name!r} has shape {tensors[name].shape}, header config wants {shape}")
    extra = set(tensors) - set(schema)
    if extra:
        raise FormatError(f"unexpected tensors {sorted(extra)}")
    for name, t in tensors.items():
        if not np.isfinite(t.astype(np.float32)).all():
            raise DataError(f"tensor {name!r} contains non-finite values")
    return config, weights


def _unpack(fmt: str, data: bytes, off: int):
    size = struct.calcsize(fmt)
    if off + size > len(data):
        raise CorruptFileError("file truncated inside header")
    return struct.unpack_from(fmt, data, off), off + size
