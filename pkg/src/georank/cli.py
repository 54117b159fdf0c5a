"""Command-line entry point (``georank``).

Exit codes: 0 success, 1 other library error, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, DataError, GeorankError, NumericalError
from .formats import read_json, read_rbe1, write_json, write_rbe1
from .gate import GateTrainConfig
from .matcher import MatcherTrainConfig
from .pipeline import (
    Dataset,
    Models,
    Pipeline,
    PipelineConfig,
    bench_latency,
    compute_labels,
    evaluate,
    labels_to_json,
    run_m3at_workflow,
    run_train_matcher,
    sweep_k,
)
from .retrieval import Embedding, build_index, rank_stage1
from .synth import BenchConfig, build_dataset

log = logging.getLogger("georank")

EXIT_CODES = {ConfigError: 2, DataError: 3, NumericalError: 4}


def exit_code(err: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(err, cls):
            return code
    return 1


def _ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="georank", description="Two-stage object identification on a synthetic benchmark.")
    p.add_argument("--seed", type=int, default=None, help="seed for models and training (default: config or 0)")
    p.add_argument("--config", type=Path, help="JSON file mirroring PipelineConfig")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--force-2d", action="store_true", help="never run stage 2")
    mode.add_argument("--force-3d", action="store_true", help="always run stage 2")
    mode.add_argument("--oracle-gate", type=Path, metavar="LABELS", help="take gate decisions from a label file")
    p.add_argument("--extractor", type=Path, help="extractor checkpoint")
    p.add_argument("--matcher", type=Path, help="matcher checkpoint")
    p.add_argument("--gate", type=Path, help="gate checkpoint")
    p.add_argument("-K", type=int, default=None, help="candidate pool size")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic benchmark")
    s.add_argument("out", type=Path)
    s.add_argument("--preset", choices=("easy", "medium", "hard"), default="medium")
    s.add_argument("--classes", type=int, default=200)
    s.add_argument("--queries", type=int, default=400)
    s.add_argument("--views", type=int, choices=(1, 3), default=1)
    s.add_argument("--difficulty", type=float, default=None)

    s = sub.add_parser("embed", help="2D embeddings of gallery or query images to an RBE1 file")
    s.add_argument("data", type=Path)
    s.add_argument("out", type=Path)
    s.add_argument("--split", default="gallery", help="gallery, train, test or all")

    s = sub.add_parser("index", help="build and check a gallery index from an RBE1 file")
    s.add_argument("embeddings", type=Path)
    s.add_argument("--raw", action="store_true", help="keep raw dot products (no L2 normalization)")

    s = sub.add_parser("rank", help="stage-1 ranking of one query")
    s.add_argument("data", type=Path)
    s.add_argument("query")
    s.add_argument("--top", type=int, default=10)

    s = sub.add_parser("train-matcher", help="train matcher adapters and heads on the train split")
    s.add_argument("data", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--epochs", type=int, default=MatcherTrainConfig.epochs)
    s.add_argument("--lr", type=float, default=MatcherTrainConfig.lr)

    s = sub.add_parser("train-gate", help="label the train split by reciprocal-rank change and fit the gate")
    s.add_argument("data", type=Path)
    s.add_argument("out", type=Path, help="gate checkpoint to write")
    s.add_argument("--labels-out", type=Path)
    s.add_argument("--epochs", type=int, default=GateTrainConfig.epochs)

    s = sub.add_parser("label", help="write reciprocal-rank labels for a split (oracle-gate input)")
    s.add_argument("data", type=Path)
    s.add_argument("out", type=Path)
    s.add_argument("--split", default="test")

    s = sub.add_parser("identify", help="identify one query")
    s.add_argument("data", type=Path)
    s.add_argument("query")
    s.add_argument("--top", type=int, default=5)

    s = sub.add_parser("evaluate", help="metrics, per-query audit, table, sweep and figures")
    s.add_argument("data", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--sweep", type=_ints, default=None, help="comma-separated K values for a recall-vs-K sweep")
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("bench-latency", help="per-sample time for 2D-only, unconditional 3D and gated runs")
    s.add_argument("data", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--split", default="test")
    s.add_argument("--limit", type=int, default=40)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--ks", type=_ints, default=[4, 16])
    s.add_argument("--no-figures", action="store_true")

    s = sub.add_parser("recipe", help="full seeded recipe: data, training, evaluation, sweep, latency")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--classes", type=int, default=200)
    s.add_argument("--queries", type=int, default=400)
    s.add_argument("--no-figures", action="store_true")
    return p


def pipeline_config(args) -> PipelineConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    base = read_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = dict(base)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.K is not None:
        cfg["K"] = args.K
    for key, path in (("extractor_path", args.extractor), ("matcher_path", args.matcher), ("gate_path", args.gate)):
        if path is not None:
            cfg[key] = str(path)
    if args.force_2d:
        cfg["force_2d"] = True
    if args.force_3d:
        cfg["force_3d"] = True
    if args.oracle_gate is not None:
        cfg["oracle_labels_path"] = str(args.oracle_gate)
    return PipelineConfig.from_dict(cfg)


def _load_pipeline(args, require_gate: Optional[bool] = None) -> Pipeline:
    cfg = pipeline_config(args)
    ds = Dataset(args.data)
    if require_gate is None:
        require_gate = cfg.mode == "gated"
    models = Models.load(cfg, require_gate=require_gate)
    return Pipeline(ds, models, cfg)


def _print_ranking(ranking, top: int, out) -> None:
    print("rank\treference\tclass\tscore", file=out)
    for i, (rid, cls, sc) in enumerate(zip(ranking.ids[:top], ranking.classes[:top], ranking.scores[:top]), 1):
        print(f"{i}\t{rid}\t{cls}\t{sc:.6f}", file=out)


def cmd_gen_data(args, out) -> None:
    over = dict(classes=args.classes, queries=args.queries, views_per_query=args.views, seed=args.seed or 0)
    if args.difficulty is not None:
        over["difficulty"] = args.difficulty
    cfg = BenchConfig.preset(args.preset, **over)
    manifest = build_dataset(cfg, args.out)
    n_gal = sum(r["split"] == "gallery" for r in manifest)
    print(f"wrote {n_gal} gallery entries and {len(manifest) - n_gal} queries to {args.out}", file=out)


def cmd_embed(args, out) -> None:
    pipe_cfg = pipeline_config(args)
    ds = Dataset(args.data)
    from .retrieval import HandcraftedProvider

    prov = HandcraftedProvider()
    if args.split == "gallery":
        ids = sorted(ds.gallery)
        vecs = [prov.embed(ds.gallery[i], i).vector for i in ids]
    else:
        qs = ds.split(args.split)
        if not qs:
            raise DataError(f"split {args.split!r} is empty")
        pipe = Pipeline(ds, Models.fresh(pipe_cfg.seed), pipe_cfg)
        ids = [q.id for q in qs]
        vecs = [pipe.embed(q).vector for q in qs]
    write_rbe1(args.out, ids, np.stack(vecs))
    print(f"wrote {len(ids)} embeddings of dim {len(vecs[0])} to {args.out}", file=out)


def cmd_index(args, out) -> None:
    ids, vecs = read_rbe1(args.embeddings)
    idx = build_index([Embedding(v, i) for i, v in zip(ids, vecs)], normalize=not args.raw)
    print(f"index: {len(idx.ids)} references, dim {idx.matrix.shape[1]}, normalized={not args.raw}", file=out)


def cmd_rank(args, out) -> None:
    cfg = pipeline_config(args)
    ds = Dataset(args.data)
    pipe = Pipeline(ds, Models.fresh(cfg.seed, cfg.S), cfg)
    q = ds.query(args.query)
    _print_ranking(pipe.stage1(q), args.top, out)


def cmd_train_matcher(args, out) -> None:
    cfg = pipeline_config(args)
    ds = Dataset(args.data)
    train = ds.split("train")
    if not train:
        raise DataError("train split is empty")
    models = Models.fresh(cfg.seed, cfg.S)
    pipe = Pipeline(ds, models, cfg)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_json(args.out_dir / "extractor.json", models.extractor.to_checkpoint())
    _, stats = run_train_matcher(pipe, train, MatcherTrainConfig(epochs=args.epochs, lr=args.lr, seed=cfg.seed))
    write_json(args.out_dir / "matcher.json", pipe.models.matcher.to_checkpoint())
    write_json(args.out_dir / "matcher_train.json", stats)
    print(f"epochs={len(stats['losses'])} final_loss={stats['losses'][-1]:.4f} used={stats['used']} skipped={stats['skipped']}", file=out)


def cmd_train_gate(args, out) -> None:
    pipe = _load_pipeline(args, require_gate=False)
    train = pipe.dataset.split("train")
    gate, labels, loss = run_m3at_workflow(pipe, train, GateTrainConfig(epochs=args.epochs, seed=pipe.config.seed))
    write_json(args.out, gate.to_checkpoint())
    if args.labels_out:
        write_json(args.labels_out, labels_to_json(labels))
    pos = sum(l.y for l in labels)
    print(f"labels: {pos} positive / {len(labels)}; final loss {loss:.4f}", file=out)


def cmd_label(args, out) -> None:
    cfg = pipeline_config(args)
    ds = Dataset(args.data)
    pipe = Pipeline(ds, Models.load(cfg), cfg)
    qs = ds.split(args.split)
    if not qs:
        raise DataError(f"split {args.split!r} is empty")
    labels = compute_labels(pipe, qs)
    write_json(args.out, labels_to_json(labels))
    print(f"labels: {sum(l.y for l in labels)} positive / {len(labels)}", file=out)


def cmd_identify(args, out) -> None:
    pipe = _load_pipeline(args)
    q = pipe.dataset.query(args.query)
    res = pipe.identify(q)
    print(f"# query={q.id} mode={pipe.config.mode} stage2={'yes' if res.stage2_invoked else 'no'}", file=out)
    _print_ranking(res.ranking, args.top, out)


def cmd_evaluate(args, out) -> None:
    from .recipe import format_table, rows_to_csv, strip_timing

    pipe = _load_pipeline(args)
    qs = pipe.dataset.split(args.split)
    rep = evaluate(pipe, qs)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    mode = rep["mode"]
    write_json(args.out_dir / "metrics.json", strip_timing(rep))
    write_json(args.out_dir / "timing.json", rep["timing"])
    table = format_table({mode: rep})
    (args.out_dir / "table.txt").write_text(table)
    out.write(table)
    if args.sweep:
        rows = sweep_k(pipe, qs, args.sweep, mode)
        (args.out_dir / "k_sweep.csv").write_text(rows_to_csv(rows))
        if not args.no_figures:
            from . import plotting

            plotting.k_sweep(rows, args.out_dir / "k_sweep.png")
    if not args.no_figures:
        from . import plotting

        plotting.recall_bars({mode: rep}, args.out_dir / "recall.png")


def cmd_bench_latency(args, out) -> None:
    from .recipe import rows_to_csv

    cfg = pipeline_config(args)
    ds = Dataset(args.data)
    models = Models.load(cfg, require_gate=True)
    qs = ds.split(args.split)[: args.limit]
    if not qs:
        raise DataError(f"split {args.split!r} is empty")
    rows = bench_latency(ds, models, qs, cfg, args.repetitions, args.ks)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_json(args.out_dir / "latency.json", rows)
    text = rows_to_csv(rows)
    (args.out_dir / "latency.csv").write_text(text)
    out.write(text)
    if not args.no_figures:
        from . import plotting

        plotting.latency_bars(rows, args.out_dir / "latency.png")


def cmd_recipe(args, out) -> None:
    from .recipe import RecipeConfig, format_table, run_recipe

    cfg = RecipeConfig(classes=args.classes, queries=args.queries, seed=args.seed or 0, figures=not args.no_figures)
    res = run_recipe(args.out_dir, cfg)
    out.write(format_table(res.metrics))
    print(f"recipe finished in {res.seconds:.1f} s; outputs under {res.root}", file=out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "embed": cmd_embed,
    "index": cmd_index,
    "rank": cmd_rank,
    "train-matcher": cmd_train_matcher,
    "train-gate": cmd_train_gate,
    "label": cmd_label,
    "identify": cmd_identify,
    "evaluate": cmd_evaluate,
    "bench-latency": cmd_bench_latency,
    "recipe": cmd_recipe,
}


def main(argv: Optional[List[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except GeorankError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
