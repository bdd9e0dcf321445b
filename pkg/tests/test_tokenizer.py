import numpy as np
import pytest

from reform import ByteTokenizer, DataError, VocabTokenizer
from reform.tokenizer import BYTE_VOCAB, EOS, SEP, VOCAB_SIZE


def test_byte_roundtrip():
    tok = ByteTokenizer()
    ids = tok.encode("hello world")
    assert ids.tolist() == [ord(c) for c in "hello world"]
    assert tok.decode(ids) == "hello world"


def test_specials_reserved_block():
    assert BYTE_VOCAB == 256
    assert VOCAB_SIZE == 264  # byte block + 8 reserved specials
    assert SEP == 259 and EOS == 258


def test_decode_skips_specials():
    tok = ByteTokenizer()
    text = tok.decode(np.array([ord("a"), SEP, ord("b"), EOS]))
    assert text == "ab"


def test_decode_rejects_out_of_range():
    with pytest.raises(DataError):
        ByteTokenizer().decode(np.array([VOCAB_SIZE]))


def test_vocab_tokenizer_roundtrip(tmp_path):
    vt = VocabTokenizer(["a", "b", "ab", "\n", "c\\d"])
    path = tmp_path / "vocab.txt"
    vt.save(path)
    loaded = VocabTokenizer.load(path)
    assert loaded.tokens == vt.tokens
    ids = loaded.encode("abab\n")
    # greedy longest match prefers "ab" over "a"+"b"
    assert [loaded.tokens[i] for i in ids] == ["ab", "ab", "\n"]
    assert loaded.decode(ids) == "abab\n"


def test_vocab_tokenizer_unmatched():
    with pytest.raises(DataError):
        VocabTokenizer(["a"]).encode("xyz")
