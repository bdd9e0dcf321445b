"""Cross-layer context embeddings.

During prefill, selected per-head Q/K/V states are captured pre-rotary,
L2-normalized per head, concatenated, and stored for every input token.
Cosine similarity on the combined vector then equals the mean of the
per-head cosine similarities (all heads contribute equally).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptFileError, FormatError, SchemaError

PROJECTIONS = ("query", "key", "value", "hidden", "attention")
_PROJ_CODE = {p: i for i, p in enumerate(PROJECTIONS)}

_STORE_MAGIC = b"RFEM"
_STORE_VERSION = 1
_PRECISIONS = {"f32": np.float32, "f16": np.float16}


@dataclass(frozen=True)
class HeadSpec:
    """A (layer, projection, head) tap point.

    ``head`` is ignored for the ``hidden`` and ``attention`` projections;
    those two exist for head evaluation only and never enter the store.
    """

    layer: int
    projection: str
    head: int = 0

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.layer < 0 or self.head < 0:
            raise ConfigError("layer and head must be nonnegative")

    def validate(self, config) -> None:
        if self.layer >= config.n_layers:
            raise ConfigError(f"tap layer {self.layer} outside {config.n_layers} layers")
        if self.projection == "query" and self.head >= config.n_q_heads:
            raise ConfigError(f"query head {self.head} outside {config.n_q_heads} heads")
        if self.projection in ("key", "value") and self.head >= config.n_kv_heads:
            raise ConfigError(
                f"{self.projection} head {self.head} outside {config.n_kv_heads} heads")

    def dim(self, config) -> int:
        return config.d_model if self.projection == "hidden" else config.head_dim

    def __str__(self) -> str:
        return f"{self.layer}:{self.projection}:{self.head}"

    @classmethod
    def parse(cls, text: str) -> "HeadSpec":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"head spec {text!r} is not layer:projection:head")
        try:
            return cls(int(parts[0]), parts[1], int(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"bad head spec {text!r}: {exc}") from None


def exit_layer_for(specs) -> int:
    """Topmost tapped layer + 1: the prefill depth the spec set requires."""
    if not specs:
        raise ConfigError("at least one head spec is required")
    return 1 + max(s.layer for s in specs)


@dataclass
class TappedStates:
    """Pre-rotary per-token states captured during a chunk forward."""

    states: dict[HeadSpec, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, spec: HeadSpec) -> np.ndarray:
        try:
            return self.states[spec]
        except KeyError:
            raise ConfigError(f"tap {spec} was not captured by the forward pass") from None

    def __contains__(self, spec: HeadSpec) -> bool:
        return spec in self.states


def extract(tapped: TappedStates, specs) -> list[np.ndarray]:
    """Per-spec raw segments for every token of the chunk."""
    return [tapped[spec] for spec in specs]


def combine(segments: list[np.ndarray]) -> np.ndarray:
    """Normalize each segment per token and concatenate.

    Zero segments pass through as zero instead of dividing by zero.
    """
    normed = []
    for seg in segments:
        norms = np.linalg.norm(seg, axis=-1, keepdims=True)
        normed.append(np.divide(seg, norms, out=np.zeros_like(seg), where=norms > 0))
    return np.concatenate(normed, axis=-1)


class EmbeddingStore:
    """Append-only store of combined context embeddings for all tokens."""

    def __init__(self, specs, head_dim: int, precision: str = "f16"):
        specs = list(specs)
        if not specs:
            raise ConfigError("embedding store needs at least one head spec")
        for spec in specs:
            if spec.projection not in ("query", "key", "value"):
                raise ConfigError(
                    f"projection {spec.projection!r} is evaluation-only and cannot be stored")
        if precision not in _PRECISIONS:
            raise ConfigError(f"unknown storage precision {precision!r}")
        self.specs = specs
        self.head_dim = head_dim
        self.dim = head_dim * len(specs)
        self.precision = precision
        self._dtype = _PRECISIONS[precision]
        self._chunks: list[np.ndarray] = []
        self.token_count = 0

    def append_tokens(self, combined: np.ndarray) -> None:
        combined = np.asarray(combined)
        if combined.ndim != 2 or combined.shape[1] != self.dim:
            raise SchemaError(
                f"combined vectors of dim {combined.shape} do not match store dim {self.dim}")
        self._chunks.append(combined.astype(self._dtype))
        self.token_count += combined.shape[0]

    def vectors(self) -> np.ndarray:
        if not self._chunks:
            return np.zeros((0, self.dim), dtype=self._dtype)
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks)]
        return self._chunks[0]

    @property
    def nbytes(self) -> int:
        return self.token_count * self.dim * np.dtype(self._dtype).itemsize

    def save(self, path) -> None:
        vecs = self.vectors()
        with open(path, "wb") as fh:
            fh.write(_STORE_MAGIC)
            fh.write(struct.pack("<IBH", _STORE_VERSION,
                                 0 if self.precision == "f32" else 1, len(self.specs)))
            for spec in self.specs:
                fh.write(struct.pack("<IBI", spec.layer, _PROJ_CODE[spec.projection],
                                     spec.head))
            fh.write(struct.pack("<IQ", self.head_dim, self.token_count))
            fh.write(vecs.astype("<" + vecs.dtype.str[1:]).tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != _STORE_MAGIC:
            raise FormatError("not an embedding store file")
        version, prec_code, n_specs = struct.unpack_from("<IBH", data, 4)
        if version != _STORE_VERSION:
            raise FormatError(f"unsupported embedding store version {version}")
        off = 4 + 7
        specs = []
        for _ in range(n_specs):
            layer, proj, head = struct.unpack_from("<IBI", data, off)
            off += 9
            specs.append(HeadSpec(layer, PROJECTIONS[proj], head))
        head_dim, token_count = struct.unpack_from("<IQ", data, off)
        off += 12
        precision = "f32" if prec_code == 0 else "f16"
        store = cls(specs, head_dim, precision)
        dim = store.dim
        expected = token_count * dim * np.dtype(store._dtype).itemsize
        payload = data[off:]
        if len(payload) != expected:
            raise CorruptFileError(
                f"embedding payload {len(payload)} bytes, header promises {expected}")
        vecs = np.frombuffer(payload, dtype="<" + np.dtype(store._dtype).str[1:])
        store._chunks = [vecs.reshape(token_count, dim).astype(store._dtype)]
        store.token_count = int(token_count)
        return store
