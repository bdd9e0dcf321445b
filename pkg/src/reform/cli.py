"""Command-line entry points.

Verbs: run, niah, headscan, ablate, export-report. All randomness flows
from explicit --seed flags; identical invocations produce identical stdout
and sidecar files. REFORM_LOG sets the log level. Exit codes: 0 ok,
2 usage, 3 I/O, 4 format, 5 config, 6 data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench, headfinder
from .embeddings import HeadSpec
from .errors import ReformError, UsageError
from .kvcache import EvictionPolicy
from .model import Model
from .pipeline import PipelineConfig, QuerySplit, config_to_text, load_config
from .rfwt import load_weights
from .tokenizer import ByteTokenizer

log = logging.getLogger("reform")
_TOKENIZER = ByteTokenizer()
QUERY_MARKER_BYTE = 0x1E  # ASCII record separator in prompt files -> SEP token


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("REFORM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ReformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"I/O error: {exc}" + (f" ({name})" if name else ""), file=sys.stderr)
        return 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reform",
                                     description="long-context inference engine")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--model", required=True, help="RFWT weight file")
        p.add_argument("--config", help="pipeline config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any pipeline config field (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", help="sidecar output path")

    p_run = sub.add_parser("run", help="prefill a prompt file and generate")
    common(p_run)
    p_run.add_argument("--prompt", required=True, help="prompt file (bytes)")
    p_run.add_argument("--method", default="reform", choices=bench.METHODS)
    p_run.add_argument("--max-new", type=int, default=64)
    p_run.add_argument("--query-suffix", type=int,
                       help="override: query = last N tokens")
    p_run.set_defaults(func=cmd_run)

    p_niah = sub.add_parser("niah", help="needle-in-a-haystack recall grid")
    common(p_niah)
    p_niah.add_argument("--method", default="reform", choices=bench.METHODS)
    p_niah.add_argument("--corpus", help="filler text file (default: built-in)")
    p_niah.add_argument("--lengths", default="1024,2048,4096,8192,16384")
    p_niah.add_argument("--depths", default="0,25,50,75,100")
    p_niah.add_argument("--samples", type=int, default=5)
    p_niah.add_argument("--max-new", type=int, default=16)
    p_niah.set_defaults(func=cmd_niah)

    p_scan = sub.add_parser("headscan", help="rank every tap by MNR")
    common(p_scan)
    p_scan.add_argument("--datasets", default="kv,qa")
    p_scan.add_argument("--samples", type=int, default=3)
    p_scan.add_argument("--target-len", type=int, default=2048)
    p_scan.add_argument("--pairs", type=int, default=4)
    p_scan.add_argument("--heads-out", help="selected heads in config syntax")
    p_scan.set_defaults(func=cmd_headscan)

    p_abl = sub.add_parser("ablate", help="head-set x policy comparison")
    common(p_abl)
    p_abl.add_argument("--head-sets", default="selected,random,bad")
    p_abl.add_argument("--bad-heads", help="comma-separated layer:proj:head specs")
    p_abl.add_argument("--policies", default="h2o,streamingllm,tova")
    p_abl.add_argument("--lengths", default="2048")
    p_abl.add_argument("--depths", default="25,50,75")
    p_abl.add_argument("--samples", type=int, default=2)
    p_abl.add_argument("--max-new", type=int, default=16)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("export-report", help="render sidecars as text tables")
    p_rep.add_argument("--input", required=True, nargs="+", help="sidecar file(s)")
    p_rep.add_argument("--out", help="write the table here instead of stdout")
    p_rep.set_defaults(func=cmd_export_report)
    return parser


def _load_model(args) -> Model:
    config, weights = load_weights(args.model)
    return Model(config, weights)


def _load_pipeline_config(args, model: Model) -> PipelineConfig:
    from .pipeline import parse_config_text
    cfg = PipelineConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if getattr(args, "set", None):
        cfg = parse_config_text("\n".join(args.set), cfg)
    if not cfg.selected_heads:
        # default tap: value head 0 of the top layer (full-depth prefill)
        cfg = replace(cfg, selected_heads=[HeadSpec(model.config.n_layers - 1, "value", 0)])
    return cfg


def cmd_run(args) -> int:
    model = _load_model(args)
    cfg = _load_pipeline_config(args, model)
    with open(args.prompt, "rb") as fh:
        tokens = _TOKENIZER.encode(fh.read())
    if args.query_suffix is not None:
        cfg = replace(cfg, query_split=QuerySplit("suffix", args.query_suffix))
    if cfg.query_split.kind == "separator":
        tokens = np.where(tokens == QUERY_MARKER_BYTE, cfg.query_split.value, tokens)
    out, stats = bench.run_method(model, tokens, args.method, cfg, args.max_new)
    print(_TOKENIZER.decode(out))
    report = bench.WorkReport.from_stats(args.method, stats)
    sidecar = args.out or (args.prompt + ".report")
    with open(sidecar, "w", encoding="utf-8") as fh:
        fh.write(report.to_sidecar())
        fh.write("".join("config." + line + "\n"
                         for line in config_to_text(cfg).splitlines()))
    log.info("sidecar written to %s", sidecar)
    return 0


def cmd_niah(args) -> int:
    model = _load_model(args)
    cfg = _load_pipeline_config(args, model)
    corpus = None
    if args.corpus:
        with open(args.corpus, "r", encoding="utf-8") as fh:
            corpus = fh.read()
    lengths = _int_list(args.lengths)
    depths = _float_list(args.depths)
    grid = bench.niah_grid(model, cfg, args.method, lengths, depths, args.samples,
                           args.seed, corpus=corpus, max_new_tokens=args.max_new,
                           jobs=args.jobs)
    print(grid.to_table(), end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(grid.to_sidecar())
    return 0


def cmd_headscan(args) -> int:
    model = _load_model(args)
    cfg = _load_pipeline_config(args, model)
    datasets = _scan_datasets(args)
    results = []
    for dataset in datasets:
        for candidate in headfinder.all_candidates(model.config):
            results.append(headfinder.eval_head_mnr(
                model, dataset, candidate, chunk_size=cfg.chunk_size,
                cache_budget=cfg.cache_budget, sink_len=cfg.sink_len,
                recent_len=cfg.recent_len, eviction=cfg.eviction,
                observer_window=cfg.observer_window))
    report = headfinder.format_report(results)
    by_kind: dict[str, list] = {}
    for dataset, result_block in zip(datasets, _split_by_dataset(results, datasets)):
        by_kind.setdefault(dataset.kind, []).extend(result_block)
    heads = headfinder.select_heads(by_kind, model.config.n_layers)
    heads_line = "selected_heads = " + ", ".join(str(h) for h in heads)

    out = args.out or "headscan.tsv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report)
    heads_out = args.heads_out or (out + ".heads")
    with open(heads_out, "w", encoding="utf-8") as fh:
        fh.write(heads_line + "\n")
    print(heads_line)
    return 0


def _split_by_dataset(results, datasets):
    per = len(results) // len(datasets)
    return [results[i * per:(i + 1) * per] for i in range(len(datasets))]


def _scan_datasets(args) -> list[headfinder.PlantedDataset]:
    corpus = headfinder.synthetic_corpus(args.seed, 4 * args.target_len)
    out = []
    for name in (part.strip() for part in args.datasets.split(",")):
        if name == "kv":
            out.append(headfinder.gen_kv_dataset(corpus, args.pairs, args.target_len,
                                                 args.seed, n_samples=args.samples))
        elif name == "qa":
            entries = headfinder.builtin_qa_entries(args.seed + 1, args.samples)
            out.append(headfinder.gen_qa_dataset(corpus, entries, args.target_len,
                                                 args.seed + 1))
        else:
            raise UsageError(f"unknown headscan dataset {name!r} (have kv, qa)")
    return out


def cmd_ablate(args) -> int:
    model = _load_model(args)
    cfg = _load_pipeline_config(args, model)
    lengths = _int_list(args.lengths)
    depths = _float_list(args.depths)
    head_sets: dict[str, list[HeadSpec]] = {}
    for name in (part.strip() for part in args.head_sets.split(",")):
        if name == "selected":
            head_sets[name] = list(cfg.selected_heads)
        elif name == "random":
            head_sets[name] = bench.random_head_set(model.config, args.seed)
        elif name == "bad":
            if args.bad_heads:
                head_sets[name] = [HeadSpec.parse(p) for p in args.bad_heads.split(",")]
            else:
                head_sets[name] = _worst_heads(model, cfg, args)
        else:
            raise UsageError(f"unknown head set {name!r} (have selected, random, bad)")
    policies = [EvictionPolicy(p.strip()) for p in args.policies.split(",")]
    rows = bench.ablate(model, cfg, head_sets, policies, lengths, depths,
                        args.samples, args.seed, max_new_tokens=args.max_new,
                        jobs=args.jobs)
    table = f"# random head-set seed = {args.seed}\n" + bench.ablation_table(rows)
    print(table, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    return 0


def _worst_heads(model, cfg, args, n_heads: int = 4) -> list[HeadSpec]:
    """Highest mean MNR across both synthetic datasets (storable taps only)."""
    corpus = headfinder.synthetic_corpus(args.seed, 4096)
    datasets = [headfinder.gen_kv_dataset(corpus, 2, 768, args.seed, n_samples=1),
                headfinder.gen_qa_dataset(corpus, headfinder.builtin_qa_entries(args.seed, 1),
                                          768, args.seed)]
    means: list[tuple[float, HeadSpec]] = []
    for spec in headfinder.all_candidates(model.config):
        if spec.projection not in ("query", "key", "value"):
            continue
        vals = [headfinder.eval_head_mnr(model, ds, spec, chunk_size=cfg.chunk_size,
                                         cache_budget=cfg.cache_budget,
                                         sink_len=cfg.sink_len, recent_len=cfg.recent_len).mnr
                for ds in datasets]
        means.append((float(np.mean(vals)), spec))
    means.sort(key=lambda item: (-item[0], item[1].layer, item[1].projection, item[1].head))
    return [spec for _, spec in means[:n_heads]]


def cmd_export_report(args) -> int:
    blocks = []
    for path in args.input:
        with open(path, "r", encoding="utf-8") as fh:
            blocks.append(_render_sidecar(path, fh.read()))
    table = "\n".join(blocks)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        print(table, end="")
    return 0


def _render_sidecar(path: str, text: str) -> str:
    pairs = []
    cells = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("config."):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("cell "):
            _, length, depth = key.split()
            cells.append((int(length), float(depth), float(value)))
        else:
            pairs.append((key, value))
    lines = [f"== {path} =="]
    width = max((len(k) for k, _ in pairs), default=0)
    lines.extend(f"{k:<{width}}  {v}" for k, v in pairs)
    if cells:
        lengths = sorted({c[0] for c in cells})
        depths = sorted({c[1] for c in cells})
        lines.append("length" + "".join(f"\tdepth {d:g}%" for d in depths))
        for length in lengths:
            row = [str(length)]
            for depth in depths:
                match = [c[2] for c in cells if c[0] == length and c[1] == depth]
                row.append(f"{match[0]:.3f}" if match else "-")
            lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad integer list {text!r}: {exc}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}: {exc}") from None


if __name__ == "__main__":
    sys.exit(main())
