import numpy as np
import pytest

from oracles import dense_forward

from reform import (ConfigError, EvictionPolicy, HeadSpec, Model, ModelConfig,
                    PipelineConfig, QuerySplit, SplitError, forward_chunk,
                    generate, reform_prefill, split_query)
from reform.pipeline import config_to_text, load_config, parse_config_text
from reform.tokenizer import SEP


def unbounded_cfg(model, heads=None, input_len=64, chunk=16):
    heads = heads or [HeadSpec(model.config.n_layers - 1, "value", 0)]
    return PipelineConfig(chunk_size=chunk, cache_budget=2 * input_len, sink_len=2,
                          recent_len=2, selected_heads=heads,
                          recomputation_budget=input_len,
                          query_split=QuerySplit("suffix", 8),
                          neighbor_window=2, observer_window=4)


class TestSplitQuery:
    def test_suffix_rule(self):
        ctx, query = split_query(np.arange(10), QuerySplit("suffix", 4))
        assert len(ctx) == 6 and len(query) == 4
        assert np.array_equal(np.concatenate([ctx, query]), np.arange(10))

    def test_separator_kept_with_query(self):
        tokens = np.array([1, 2, 3, 4, 5, 6, SEP, 8, 9, 10])
        ctx, query = split_query(tokens, QuerySplit("separator", SEP))
        assert ctx.tolist() == [1, 2, 3, 4, 5, 6]
        assert query.tolist() == [SEP, 8, 9, 10]
        assert np.array_equal(np.concatenate([ctx, query]), tokens)

    def test_last_separator_wins(self):
        tokens = np.array([SEP, 1, SEP, 2, 3])
        ctx, query = split_query(tokens, QuerySplit("separator", SEP))
        assert query.tolist() == [SEP, 2, 3]

    def test_missing_separator(self):
        with pytest.raises(SplitError):
            split_query(np.arange(5), QuerySplit("separator", SEP))

    def test_suffix_too_long(self):
        with pytest.raises(SplitError):
            split_query(np.arange(5), QuerySplit("suffix", 5))


class TestDegenerateEquivalence:
    def test_matches_dense_baseline_exactly(self, tiny_model):
        """Unbounded budgets + full-depth taps: REFORM output == dense output."""
        rng = np.random.default_rng(0)
        for trial in range(5):
            tokens = rng.integers(0, 256, size=48)
            cfg = unbounded_cfg(tiny_model, input_len=48, chunk=48)  # one chunk
            prefill = reform_prefill(tiny_model, tokens, cfg)
            assert prefill.selection.indices.tolist() == list(range(48))
            out = generate(tiny_model, prefill, max_new_tokens=8)

            dense_caches = tiny_model.new_caches(None)
            res = forward_chunk(tiny_model, tokens, dense_caches,
                                tiny_model.config.n_layers)
            assert np.array_equal(prefill.next_logits, res.logits[-1])
            from reform import decode_token
            logits = res.logits[-1]
            expected = []
            for _ in range(8):
                tok = int(np.argmax(logits))
                expected.append(tok)
                logits = decode_token(tiny_model, dense_caches, tok)
            assert out.tolist() == expected

    def test_chunked_prefill_matches_oracle_logits(self, tiny_model):
        tokens = np.random.default_rng(1).integers(0, 256, size=64)
        cfg = unbounded_cfg(tiny_model, input_len=64, chunk=16)
        prefill = reform_prefill(tiny_model, tokens, cfg)
        ref = dense_forward(tiny_model.config, tiny_model.weights.tensors, tokens)
        scale = np.abs(ref[-1]).max()
        assert np.abs(prefill.next_logits - ref[-1]).max() / scale < 1e-4


class TestStats:
    def test_layer_execution_closed_form(self, tiny_model):
        tokens = np.random.default_rng(2).integers(0, 256, size=64)
        cfg = unbounded_cfg(tiny_model, input_len=64, chunk=16)
        prefill = reform_prefill(tiny_model, tokens, cfg)
        n_layers = tiny_model.config.n_layers
        expected = 64 * cfg.exit_layer + len(prefill.selection) * n_layers
        assert prefill.stats.layer_executions == expected
        out = generate(tiny_model, prefill, max_new_tokens=5)
        expected += len(out) * n_layers
        assert prefill.stats.layer_executions == expected
        assert prefill.stats.decode_steps == len(out)

    def test_memory_ceiling(self, tiny_model):
        tokens = np.random.default_rng(3).integers(0, 256, size=128)
        cfg = PipelineConfig(chunk_size=16, cache_budget=24, sink_len=4, recent_len=4,
                             selected_heads=[HeadSpec(0, "value", 0)],
                             recomputation_budget=32,
                             query_split=QuerySplit("suffix", 8),
                             neighbor_window=2, observer_window=4)
        prefill = reform_prefill(tiny_model, tokens, cfg)
        assert max(prefill.stats.peak_cache_entries) <= 24 + 16
        # early exit: layer 1 holds nothing until recomputation fills it
        assert prefill.stats.peak_cache_entries[1] == len(prefill.selection)
        assert len(prefill.caches[1]) == len(prefill.selection)
        assert prefill.stats.recomputed_tokens == len(prefill.selection) <= 32

    def test_embedding_bytes(self, tiny_model):
        tokens = np.random.default_rng(4).integers(0, 256, size=32)
        cfg = unbounded_cfg(tiny_model, input_len=32, chunk=8)
        prefill = reform_prefill(tiny_model, tokens, cfg)
        head_dim = tiny_model.config.head_dim
        assert prefill.stats.embedding_store_bytes == 32 * head_dim * 2  # f16


class TestRecomputationFidelity:
    def test_recompute_equals_dense_on_subsequence(self, tiny_model):
        tokens = np.random.default_rng(5).integers(0, 256, size=96)
        cfg = PipelineConfig(chunk_size=24, cache_budget=48, sink_len=4, recent_len=4,
                             selected_heads=[HeadSpec(1, "value", 1)],
                             recomputation_budget=40,
                             query_split=QuerySplit("suffix", 8),
                             neighbor_window=2, observer_window=4)
        prefill = reform_prefill(tiny_model, tokens, cfg)
        gathered = tokens[prefill.selection.indices]
        caches = tiny_model.new_caches(None)
        res = forward_chunk(tiny_model, gathered, caches, tiny_model.config.n_layers)
        for layer in range(tiny_model.config.n_layers):
            assert np.array_equal(prefill.caches[layer].keys, caches[layer].keys)
            assert np.array_equal(prefill.caches[layer].values, caches[layer].values)
        assert np.array_equal(prefill.next_logits, res.logits[-1])

    def test_determinism(self, tiny_model):
        tokens = np.random.default_rng(6).integers(0, 256, size=64)
        cfg = PipelineConfig(chunk_size=16, cache_budget=32, sink_len=4, recent_len=4,
                             selected_heads=[HeadSpec(0, "key", 0)],
                             recomputation_budget=32,
                             query_split=QuerySplit("suffix", 6),
                             neighbor_window=2, observer_window=4)
        a = reform_prefill(tiny_model, tokens, cfg)
        b = reform_prefill(tiny_model, tokens, cfg)
        assert a.selection.indices.tolist() == b.selection.indices.tolist()
        assert np.array_equal(a.next_logits, b.next_logits)
        out_a = generate(tiny_model, a, 6)
        out_b = generate(tiny_model, b, 6)
        assert out_a.tolist() == out_b.tolist()


class TestGenerate:
    def test_zero_tokens(self, tiny_model):
        tokens = np.random.default_rng(7).integers(0, 256, size=32)
        prefill = reform_prefill(tiny_model, tokens, unbounded_cfg(tiny_model, input_len=32))
        assert generate(tiny_model, prefill, 0).tolist() == []

    def test_decoded_tokens_enter_cache(self, tiny_model):
        tokens = np.random.default_rng(8).integers(0, 256, size=32)
        prefill = reform_prefill(tiny_model, tokens, unbounded_cfg(tiny_model, input_len=32))
        before = len(prefill.caches[0])
        out = generate(tiny_model, prefill, 4)
        assert len(prefill.caches[0]) == before + len(out)
        tail = prefill.caches[0].assigned_positions[-len(out):]
        assert tail.tolist() == list(range(before, before + len(out)))


class TestConfigValidation:
    def test_exit_layer_derived(self):
        cfg = PipelineConfig(selected_heads=[HeadSpec(2, "value", 0),
                                             HeadSpec(5, "key", 1)])
        assert cfg.exit_layer == 6

    def test_budget_below_forced(self, tiny_model):
        cfg = PipelineConfig(cache_budget=8, sink_len=8, recent_len=8,
                             selected_heads=[HeadSpec(0, "value", 0)])
        with pytest.raises(ConfigError):
            cfg.validate(tiny_model.config)

    def test_recompute_budget_below_forced_tokens(self, tiny_model):
        tokens = np.random.default_rng(9).integers(0, 256, size=64)
        cfg = PipelineConfig(chunk_size=16, cache_budget=32, sink_len=8, recent_len=8,
                             selected_heads=[HeadSpec(0, "value", 0)],
                             recomputation_budget=10,
                             query_split=QuerySplit("suffix", 8),
                             neighbor_window=2, observer_window=4)
        with pytest.raises(ConfigError):
            reform_prefill(tiny_model, tokens, cfg)


class TestConfigFile:
    def test_roundtrip(self):
        cfg = PipelineConfig(chunk_size=128, cache_budget=256, sink_len=8, recent_len=8,
                             eviction=EvictionPolicy.TOVA,
                             selected_heads=[HeadSpec(0, "value", 1), HeadSpec(1, "key", 0)],
                             recomputation_budget=64,
                             query_split=QuerySplit("suffix", 12),
                             neighbor_window=4, observer_window=8,
                             embed_precision="f32")
        parsed = parse_config_text(config_to_text(cfg))
        assert parsed == cfg

    def test_file_with_comments(self, tmp_path):
        path = tmp_path / "p.cfg"
        path.write_text("# pipeline\nchunk_size = 64\nselected_heads = 1:value:0\n"
                        "query_split = sep:259\n")
        cfg = load_config(path)
        assert cfg.chunk_size == 64
        assert cfg.selected_heads == [HeadSpec(1, "value", 0)]
        assert cfg.query_split == QuerySplit("separator", 259)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("chunk = 3\n")
