"""The seeded end-to-end recipe: data, matcher, gate, evaluation, sweeps, latency.

Everything except ``timing.json``, ``latency.*`` and the figures is a pure
function of the seed, so two runs write byte-identical checkpoints,
manifests, labels and metrics.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .formats import dumps, write_json
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
    stage1_recall_curve,
    sweep_k,
)
from .synth import BenchConfig, build_dataset

log = logging.getLogger(__name__)

EVAL_MODES = ("2d", "3d", "gated", "oracle")
SWEEP_KS = (4, 8, 16, 32, 64)


@dataclass
class RecipeConfig:
    preset: str = "medium"
    classes: int = 200
    queries: int = 400
    seed: int = 0
    K: int = 16
    S: int = 20
    matcher_epochs: int = MatcherTrainConfig.epochs
    gate_epochs: int = GateTrainConfig.epochs
    sweep_ks: Sequence[int] = SWEEP_KS
    latency_queries: int = 40
    latency_repetitions: int = 1
    latency_ks: Sequence[int] = (4, 8, 16)
    figures: bool = True


@dataclass
class RecipeResult:
    root: Path
    metrics: Dict[str, dict]
    sweep: List[dict]
    latency: List[dict]
    extractor_sha_before: str
    extractor_sha_after: str
    seconds: float
    files: Dict[str, Path] = field(default_factory=dict)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def strip_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def format_table(metrics: Dict[str, dict]) -> str:
    """Plain-text metric table, one row per mode."""
    lines = [f"{'mode':<8} {'R@1':>7} {'R@2':>7} {'R@3':>7} {'MRR':>7} {'stage2':>7}"]
    for mode, r in metrics.items():
        rec = r["recall"]
        lines.append(
            f"{mode:<8} {rec['1']:>7.3f} {rec['2']:>7.3f} {rec['3']:>7.3f} {r['mrr']:>7.3f} "
            f"{r['stage2_invocations']:>4}/{r['queries']:<3}"
        )
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def run_recipe(out_dir, cfg: Optional[RecipeConfig] = None) -> RecipeResult:
    """Run the whole recipe under ``out_dir``; see module docstring for outputs."""
    cfg = cfg or RecipeConfig()
    t_start = time.perf_counter()
    root = Path(out_dir)
    data_dir, ckpt, labels_dir, report = root / "data", root / "ckpt", root / "labels", root / "report"
    for d in (ckpt, labels_dir, report):
        d.mkdir(parents=True, exist_ok=True)
    files: Dict[str, Path] = {}

    bench = BenchConfig.preset(cfg.preset, classes=cfg.classes, queries=cfg.queries, seed=cfg.seed)
    build_dataset(bench, data_dir)
    files["manifest"] = data_dir / "manifest.json"
    ds = Dataset(data_dir)
    train, test = ds.split("train"), ds.split("test")

    pcfg = PipelineConfig(K=cfg.K, S=cfg.S, seed=cfg.seed)
    models = Models.fresh(cfg.seed, cfg.S)
    pipe = Pipeline(ds, models, pcfg)

    before = dumps(models.extractor.to_checkpoint())
    write_json(ckpt / "extractor.json", models.extractor.to_checkpoint())
    files["extractor"] = ckpt / "extractor.json"
    log.info("training matcher adapters on %d queries", len(train))
    _, stats = run_train_matcher(pipe, train, MatcherTrainConfig(epochs=cfg.matcher_epochs, seed=cfg.seed))
    after = dumps(pipe.models.extractor.to_checkpoint())
    write_json(ckpt / "matcher.json", pipe.models.matcher.to_checkpoint())
    files["matcher"] = ckpt / "matcher.json"
    write_json(ckpt / "matcher_train.json", stats)

    log.info("labelling training queries and fitting the gate")
    gate, train_labels, gate_loss = run_m3at_workflow(pipe, train, GateTrainConfig(epochs=cfg.gate_epochs, seed=cfg.seed))
    write_json(ckpt / "gate.json", gate.to_checkpoint())
    files["gate"] = ckpt / "gate.json"
    write_json(labels_dir / "train.json", labels_to_json(train_labels))
    files["train_labels"] = labels_dir / "train.json"

    metrics: Dict[str, dict] = {}
    timing: Dict[str, dict] = {}
    for mode in ("2d", "3d"):
        rep = evaluate(pipe, test, mode)
        metrics[mode], timing[mode] = strip_timing(rep), rep["timing"]
    test_labels = compute_labels(pipe, test)
    write_json(labels_dir / "test.json", labels_to_json(test_labels))
    files["test_labels"] = labels_dir / "test.json"
    pipe.oracle_labels = {l.query_id: l.y for l in test_labels}
    for mode in ("gated", "oracle"):
        rep = evaluate(pipe, test, mode)
        metrics[mode], timing[mode] = strip_timing(rep), rep["timing"]

    sweep = sweep_k(pipe, test, cfg.sweep_ks, "gated")
    ceiling = stage1_recall_curve(pipe, test, cfg.sweep_ks)

    summary = {
        "recipe": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
        "bench": asdict(bench),
        "matcher_training": {"final_loss": stats["losses"][-1], "used": stats["used"], "skipped": stats["skipped"]},
        "gate_training": {
            "final_loss": gate_loss,
            "positives": sum(l.y for l in train_labels),
            "count": len(train_labels),
        },
        "extractor_sha256_before": sha256_text(before),
        "extractor_sha256_after": sha256_text(after),
        "modes": metrics,
        "stage1_recall_at_K": {str(k): v for k, v in ceiling.items()},
    }
    write_json(report / "metrics.json", summary)
    files["metrics"] = report / "metrics.json"
    (report / "table.txt").write_text(format_table(metrics))
    (report / "k_sweep.csv").write_text(rows_to_csv(sweep))
    files["k_sweep"] = report / "k_sweep.csv"

    lat_queries = test[: cfg.latency_queries]
    latency = bench_latency(ds, pipe.models, lat_queries, pcfg, cfg.latency_repetitions, cfg.latency_ks)
    write_json(report / "latency.json", latency)
    (report / "latency.csv").write_text(rows_to_csv(latency))
    seconds = time.perf_counter() - t_start
    write_json(report / "timing.json", {"stages": timing, "recipe_seconds": seconds})

    if cfg.figures:
        from . import plotting

        files["fig_recall"] = plotting.recall_bars(metrics, report / "recall.png")
        files["fig_sweep"] = plotting.k_sweep(sweep, report / "k_sweep.png")
        files["fig_latency"] = plotting.latency_bars(latency, report / "latency.png")

    return RecipeResult(root, metrics, sweep, latency, sha256_text(before), sha256_text(after), seconds, files)
