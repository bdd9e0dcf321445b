import numpy as np
import pytest

from reform import HeadSpec, PipelineConfig, QuerySplit, save_weights
from reform.bench import (METHODS, NiahGridResult, WorkReport, ablate,
                          make_niah_tokens, niah_grid, random_head_set,
                          run_method, truncate_middle)
from reform.cli import main
from reform.kvcache import EvictionPolicy
from reform.pipeline import config_to_text, parse_config_text
from reform.probe import PROBE_BAD_TAPS, PROBE_TAP, build_copy_probe
from reform.tokenizer import ByteTokenizer

TOK = ByteTokenizer()


@pytest.fixture(scope="module")
def probe():
    return build_copy_probe(seed=0)


@pytest.fixture(scope="module")
def probe_path(probe, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "probe.rfwt"
    save_weights(path, probe.config, probe.weights)
    return str(path)


@pytest.fixture()
def probe_cfg_file(tmp_path):
    cfg = PipelineConfig(chunk_size=128, cache_budget=128, sink_len=16, recent_len=16,
                         selected_heads=[PROBE_TAP], recomputation_budget=96,
                         query_split=QuerySplit("separator", 259),
                         neighbor_window=8, observer_window=16)
    path = tmp_path / "pipeline.cfg"
    path.write_text(config_to_text(cfg))
    return str(path)


def small_cfg(model, heads=None):
    return PipelineConfig(chunk_size=16, cache_budget=32, sink_len=4, recent_len=4,
                          selected_heads=heads or [HeadSpec(0, "value", 0)],
                          recomputation_budget=24,
                          query_split=QuerySplit("suffix", 6),
                          neighbor_window=2, observer_window=4)


class TestRunMethod:
    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_runs(self, tiny_model, method):
        tokens = np.random.default_rng(0).integers(0, 256, size=96)
        out, stats = run_method(tiny_model, tokens, method, small_cfg(tiny_model), 4)
        assert len(out) <= 4
        assert stats.layer_executions > 0

    def test_truncate_middle_rule(self):
        kept = truncate_middle(np.arange(100), 10)
        assert kept.tolist() == list(range(5)) + list(range(95, 100))
        assert truncate_middle(np.arange(5), 10).tolist() == list(range(5))

    def test_reform_beats_dense_on_work(self, tiny_model):
        tokens = np.random.default_rng(1).integers(0, 256, size=192)
        cfg = small_cfg(tiny_model)  # exit_layer 1 < 2 layers, budget 32 << 192
        _, reform_stats = run_method(tiny_model, tokens, "reform", cfg, 3)
        _, dense_stats = run_method(tiny_model, tokens, "dense", cfg, 3)
        assert reform_stats.attention_score_ops < dense_stats.attention_score_ops
        assert reform_stats.layer_executions < dense_stats.layer_executions

    def test_recurrent_respects_budget(self, tiny_model):
        tokens = np.random.default_rng(2).integers(0, 256, size=160)
        cfg = small_cfg(tiny_model)
        _, stats = run_method(tiny_model, tokens, "h2o", cfg, 2)
        assert max(stats.peak_cache_entries) <= cfg.cache_budget + cfg.chunk_size


class TestNiahGrid:
    def test_grid_shape_and_determinism(self, probe):
        cfg = PipelineConfig(chunk_size=128, cache_budget=128, sink_len=16,
                             recent_len=16, selected_heads=[PROBE_TAP],
                             recomputation_budget=96,
                             query_split=QuerySplit("separator", 259),
                             neighbor_window=8, observer_window=16)
        a = niah_grid(probe, cfg, "reform", [512, 768], [0, 50], 1, seed=5)
        b = niah_grid(probe, cfg, "reform", [512, 768], [0, 50], 1, seed=5, jobs=2)
        assert len(a.cells) == 4
        assert [c.recall for c in a.cells] == [c.recall for c in b.cells]
        assert a.recall_matrix().shape == (2, 2)
        assert all(c.recall == 1.0 for c in a.cells)

    def test_dense_method_perfect_recall(self, probe):
        cfg = PipelineConfig(chunk_size=128, cache_budget=128, sink_len=16,
                             recent_len=16, selected_heads=[PROBE_TAP],
                             recomputation_budget=96,
                             query_split=QuerySplit("separator", 259),
                             neighbor_window=8, observer_window=16)
        grid = niah_grid(probe, cfg, "dense", [512], [0, 25, 50, 75, 100], 1, seed=9)
        assert all(c.recall == 1.0 for c in grid.cells)

    def test_sidecar_parse_roundtrip(self, probe):
        cfg = PipelineConfig(chunk_size=128, cache_budget=128, sink_len=16,
                             recent_len=16, selected_heads=[PROBE_TAP],
                             recomputation_budget=96,
                             query_split=QuerySplit("separator", 259),
                             neighbor_window=8, observer_window=16)
        grid = niah_grid(probe, cfg, "truncation", [512], [50], 1, seed=6)
        text = grid.to_sidecar()
        assert "method = truncation" in text
        assert "cell 512 50 = 0.000000" in text
        config_lines = [l[len("config."):] for l in text.splitlines()
                        if l.startswith("config.")]
        assert parse_config_text("\n".join(config_lines)) == cfg


class TestAblate:
    def test_rows_and_ordering(self, probe):
        cfg = PipelineConfig(chunk_size=128, cache_budget=128, sink_len=16,
                             recent_len=16, selected_heads=[PROBE_TAP],
                             recomputation_budget=96,
                             query_split=QuerySplit("separator", 259),
                             neighbor_window=8, observer_window=16)
        head_sets = {"selected": [PROBE_TAP], "bad": list(PROBE_BAD_TAPS)}
        rows = ablate(probe, cfg, head_sets,
                      [EvictionPolicy.H2O, EvictionPolicy.STREAMING_LLM],
                      [1024], [50], 1, seed=7)
        assert len(rows) == 4
        recall = {(r.head_set, r.policy): r.recall for r in rows}
        assert recall[("selected", "h2o")] >= recall[("bad", "h2o")]
        assert recall[("selected", "h2o")] == 1.0

    def test_random_head_set_reproducible(self, tiny_config):
        a = random_head_set(tiny_config, seed=3)
        b = random_head_set(tiny_config, seed=3)
        assert a == b and len(a) == 4


class TestCli:
    def run_prompt(self, tmp_path, seed=8, length=768):
        tokens, gold, payload = make_niah_tokens(length, 50.0, seed=seed)
        # the CLI maps the 0x1E marker byte to the SEP token
        raw = bytes(np.where(tokens == 259, 0x1E, tokens).astype(np.uint8))
        path = tmp_path / "prompt.txt"
        path.write_bytes(raw)
        return str(path), payload

    def test_run_reform(self, tmp_path, capsys, probe_path, probe_cfg_file):
        prompt, payload = self.run_prompt(tmp_path)
        rc = main(["run", "--model", probe_path, "--prompt", prompt,
                   "--config", probe_cfg_file, "--max-new", "12",
                   "--out", str(tmp_path / "side.txt")])
        assert rc == 0
        assert payload in capsys.readouterr().out
        side = (tmp_path / "side.txt").read_text()
        assert "method = reform" in side and "recomputed_tokens" in side

    def test_run_deterministic(self, tmp_path, capsys, probe_path, probe_cfg_file):
        prompt, _ = self.run_prompt(tmp_path)
        argv = ["run", "--model", probe_path, "--prompt", prompt,
                "--config", probe_cfg_file, "--max-new", "8",
                "--out", str(tmp_path / "s1.txt")]
        assert main(argv) == 0
        first = capsys.readouterr().out
        argv[-1] = str(tmp_path / "s2.txt")
        assert main(argv) == 0
        assert capsys.readouterr().out == first
        assert (tmp_path / "s1.txt").read_text() == (tmp_path / "s2.txt").read_text()

    def test_run_reform_equals_dense_when_unbounded(self, tmp_path, capsys, probe_path):
        prompt, payload = self.run_prompt(tmp_path, length=400)
        overrides = ["cache_budget=4096", "recomputation_budget=512",
                     "chunk_size=512", "sink_len=16", "recent_len=16",
                     "selected_heads=1:value:0", "neighbor_window=8",
                     "observer_window=16"]
        outputs = []
        for method in ("reform", "dense"):
            argv = ["run", "--model", probe_path, "--prompt", prompt,
                    "--method", method, "--max-new", "12",
                    "--out", str(tmp_path / f"{method}.rep")]
            for item in overrides:
                argv += ["--set", item]
            assert main(argv) == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]
        assert payload in outputs[0]

    def test_set_flag_overrides_config(self, tmp_path, capsys, probe_path, probe_cfg_file):
        prompt, _ = self.run_prompt(tmp_path)
        side = tmp_path / "o.rep"
        rc = main(["run", "--model", probe_path, "--prompt", prompt,
                   "--config", probe_cfg_file, "--set", "recomputation_budget=80",
                   "--max-new", "2", "--out", str(side)])
        assert rc == 0
        capsys.readouterr()
        assert "config.recomputation_budget = 80" in side.read_text()

    def test_missing_model_is_io_error(self, tmp_path, capsys):
        prompt, _ = self.run_prompt(tmp_path)
        rc = main(["run", "--model", str(tmp_path / "nope.rfwt"), "--prompt", prompt])
        assert rc == 3
        assert "nope.rfwt" in capsys.readouterr().err

    def test_bad_magic_is_format_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.rfwt"
        bad.write_bytes(b"XXXX" + b"\x00" * 32)
        prompt, _ = self.run_prompt(tmp_path)
        assert main(["run", "--model", str(bad), "--prompt", prompt]) == 4

    def test_invalid_config_is_config_error(self, tmp_path, probe_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("cache_budget = 4\nsink_len = 16\nrecent_len = 16\n"
                       "selected_heads = 0:value:0\n")
        prompt, _ = self.run_prompt(tmp_path)
        assert main(["run", "--model", probe_path, "--prompt", prompt,
                     "--config", str(cfg)]) == 5

    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_niah_grid_cli(self, tmp_path, capsys, probe_path, probe_cfg_file):
        out = tmp_path / "grid.txt"
        rc = main(["niah", "--model", probe_path, "--config", probe_cfg_file,
                   "--lengths", "512", "--depths", "0,50", "--samples", "1",
                   "--max-new", "12", "--out", str(out)])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "depth 0%" in stdout and "depth 50%" in stdout
        assert "1.000" in stdout
        assert "cell 512 0 = 1.000000" in out.read_text()

    def test_headscan_cli(self, tmp_path, capsys, probe_path, probe_cfg_file, probe):
        out = tmp_path / "scan.tsv"
        rc = main(["headscan", "--model", probe_path, "--config", probe_cfg_file,
                   "--datasets", "kv,qa", "--samples", "1",
                   "--target-len", "512", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        cfg_model = probe.config
        per_dataset = cfg_model.n_layers * (cfg_model.n_q_heads
                                            + 2 * cfg_model.n_kv_heads + 2)
        assert len(lines) == 1 + 2 * per_dataset  # header + both datasets
        # ascending mnr within each dataset block
        by_ds = {}
        for line in lines[1:]:
            layer, proj, head, mnr, ds = line.split("\t")
            by_ds.setdefault(ds, []).append(float(mnr))
        for vals in by_ds.values():
            assert vals == sorted(vals)
        heads_text = (out.parent / "scan.tsv.heads").read_text()
        cfg = parse_config_text(heads_text)
        assert len(cfg.selected_heads) == 4
        stdout = capsys.readouterr().out
        assert stdout.startswith("selected_heads = ")

    def test_ablate_cli(self, tmp_path, capsys, probe_path, probe_cfg_file):
        bad = ",".join(str(h) for h in PROBE_BAD_TAPS)
        rc = main(["ablate", "--model", probe_path, "--config", probe_cfg_file,
                   "--head-sets", "selected,bad", "--bad-heads", bad,
                   "--policies", "h2o", "--lengths", "768", "--depths", "50",
                   "--samples", "1", "--max-new", "12"])
        assert rc == 0
        out = capsys.readouterr().out
        rows = [l for l in out.strip().splitlines()
                if l and not l.startswith("#") and not l.startswith("head_set")]
        assert len(rows) == 2
        recalls = {r.split("\t")[0]: float(r.split("\t")[2]) for r in rows}
        assert recalls["selected"] >= recalls["bad"]

    def test_export_report_cli(self, tmp_path, capsys, probe_path, probe_cfg_file):
        prompt, _ = self.run_prompt(tmp_path)
        side = tmp_path / "side.txt"
        main(["run", "--model", probe_path, "--prompt", prompt,
              "--config", probe_cfg_file, "--max-new", "4", "--out", str(side)])
        capsys.readouterr()
        rc = main(["export-report", "--input", str(side)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "layer_executions" in out and str(side) in out
