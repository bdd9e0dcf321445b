import numpy as np
import pytest

from reform import (ConfigError, CorruptFileError, DataError, FormatError,
                    init_random, load_weights, save_weights, weight_schema)
from reform.model import ModelWeights


def test_roundtrip_bit_identical(tiny_config, tmp_path):
    weights = init_random(tiny_config, seed=7)
    path = tmp_path / "m.rfwt"
    save_weights(path, tiny_config, weights)
    config2, weights2 = load_weights(path)
    assert config2 == tiny_config
    for name, tensor in weights.tensors.items():
        assert tensor.dtype == weights2.tensors[name].dtype
        assert np.array_equal(tensor, weights2.tensors[name])
    # save -> load -> save produces identical bytes
    path2 = tmp_path / "m2.rfwt"
    save_weights(path2, config2, weights2)
    assert path.read_bytes() == path2.read_bytes()


def test_f16_roundtrip(tiny_config, tmp_path):
    weights = init_random(tiny_config, seed=3)
    weights.tensors = {k: v.astype(np.float16) for k, v in weights.tensors.items()}
    path = tmp_path / "h.rfwt"
    save_weights(path, tiny_config, weights)
    _, loaded = load_weights(path)
    for name, tensor in weights.tensors.items():
        assert loaded.tensors[name].dtype == np.float16
        assert np.array_equal(tensor, loaded.tensors[name])


def test_bad_magic(tmp_path):
    path = tmp_path / "x.rfwt"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_weights(path)


def test_truncated_payload(tiny_config, tmp_path):
    weights = init_random(tiny_config, seed=1)
    path = tmp_path / "t.rfwt"
    save_weights(path, tiny_config, weights)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CorruptFileError):
        load_weights(path)


def test_non_finite_rejected(tiny_config, tmp_path):
    weights = init_random(tiny_config, seed=1)
    weights.tensors["final_norm"][0] = np.nan
    path = tmp_path / "n.rfwt"
    save_weights(path, tiny_config, weights)
    with pytest.raises(DataError):
        load_weights(path)


def test_missing_tensor_rejected(tiny_config):
    weights = init_random(tiny_config, seed=1)
    del weights.tensors["final_norm"]
    with pytest.raises(ConfigError):
        ModelWeights(weights.tensors).validate(tiny_config)


def test_payload_alignment(tiny_config, tmp_path):
    path = tmp_path / "a.rfwt"
    save_weights(path, tiny_config, init_random(tiny_config, seed=2))
    data = path.read_bytes()
    # walk the records and check each payload starts on an 8-byte offset
    import struct
    off = 4 + 4 + 8 * 8 + 16
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    names = list(weight_schema(tiny_config))
    assert count == len(names)
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2 + name_len
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        off += -off % 8
        assert off % 8 == 0
        off += int(np.prod(dims)) * (4 if code == 0 else 2)
    assert off == len(data)
