"""Byte-level tokenizer with a small reserved special-token block.

IDs 0..255 are raw byte values. IDs 256..263 are specials (pad, bos, eos,
sep, four unused). An external vocabulary file (one token string per line,
UTF-8, line i = token i) can replace the byte mapping; encoding then uses
greedy longest-prefix match.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, FormatError

BYTE_VOCAB = 256
PAD, BOS, EOS, SEP = 256, 257, 258, 259
N_SPECIALS = 8
VOCAB_SIZE = BYTE_VOCAB + N_SPECIALS  # 512 reserved block; 260..263 unused

_SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>"}


class ByteTokenizer:
    """Default tokenizer: one token per byte plus the special block."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str | bytes) -> np.ndarray:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(data, dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> str:
        """Render token IDs as text; specials are skipped."""
        out = bytearray()
        for t in np.asarray(ids, dtype=np.int64):
            if t < 0 or t >= self.vocab_size:
                raise DataError(f"token ID {int(t)} outside vocabulary of {self.vocab_size}")
            if t < BYTE_VOCAB:
                out.append(int(t))
        return out.decode("utf-8", errors="replace")


class VocabTokenizer:
    """Tokenizer backed by an external vocabulary file.

    Token strings may not contain raw newlines on disk; the file format
    escapes them as ``\\n`` (and backslash as ``\\\\``).
    """

    def __init__(self, tokens: list[str]):
        if not tokens:
            raise FormatError("vocabulary file is empty")
        self.tokens = list(tokens)
        self.vocab_size = len(tokens)
        self._by_string: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            self._by_string.setdefault(tok, i)
        self._max_len = max((len(t) for t in tokens if t), default=1)

    @classmethod
    def load(cls, path) -> "VocabTokenizer":
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls([_unescape(line) for line in lines])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(_escape(tok) + "\n")

    def encode(self, text: str) -> np.ndarray:
        """Greedy longest-prefix match; unmatched characters raise."""
        ids: list[int] = []
        i = 0
        while i < len(text):
            for span in range(min(self._max_len, len(text) - i), 0, -1):
                tid = self._by_string.get(text[i : i + span])
                if tid is not None:
                    ids.append(tid)
                    i += span
                    break
            else:
                raise DataError(f"no vocabulary token matches input at offset {i}")
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        parts = []
        for t in np.asarray(ids, dtype=np.int64):
            if t < 0 or t >= self.vocab_size:
                raise DataError(f"token ID {int(t)} outside vocabulary of {self.vocab_size}")
            parts.append(self.tokens[int(t)])
        return "".join(parts)


def _escape(tok: str) -> str:
    return tok.replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(tok: str) -> str:
    out = []
    i = 0
    while i < len(tok):
        if tok[i] == "\\" and i + 1 < len(tok):
            nxt = tok[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(tok[i])
        i += 1
    return "".join(out)
