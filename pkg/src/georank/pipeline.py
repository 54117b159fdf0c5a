"""Two-stage identification: embed, rank, gate, and optionally re-rank.

Also hosts the training workflows (matcher adapters, gate labels and gate
fit), evaluation reports and the latency benchmark.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .features import ExtractorConfig, ExtractorParams
from .formats import read_json, read_rbim
from .gate import GateLabel, GateParams, GateTrainConfig, gate_decide, m3at_label, train_gate
from .matcher import (
    CandidateScore,
    MatcherConfig,
    MatcherParams,
    MatcherTrainConfig,
    PairScorer,
    TrainingSample,
    rerank,
    select_candidates,
    train_matcher_adapters,
)
from .retrieval import (
    Embedding,
    FusionParams,
    HandcraftedProvider,
    Ranking,
    build_index,
    fuse_multiview,
    l2_normalize,
    mean_reciprocal_rank,
    rank_stage1,
    recall_at_k,
    reciprocal_rank,
)

log = logging.getLogger(__name__)

MODES = ("2d", "3d", "gated", "oracle")


@dataclass
class PipelineConfig:
    K: int = 16
    S: int = 20
    gate_enabled: bool = True
    force_2d: bool = False
    force_3d: bool = False
    gate_threshold: Optional[float] = None
    normalize: bool = True
    seed: int = 0
    extractor_path: Optional[str] = None
    matcher_path: Optional[str] = None
    gate_path: Optional[str] = None
    oracle_labels_path: Optional[str] = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if self.force_2d and self.force_3d:
            raise ConfigError("force-2d and force-3d are mutually exclusive")

    @property
    def mode(self) -> str:
        if self.force_2d:
            return "2d"
        if self.force_3d:
            return "3d"
        if self.oracle_labels_path:
            return "oracle"
        return "gated" if self.gate_enabled else "2d"

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ dataset


@dataclass
class QueryRecord:
    id: str
    class_id: str
    split: str
    views: List[np.ndarray]

    def view_items(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"{self.id}/{i}", v) for i, v in enumerate(self.views)]


class Dataset:
    """Gallery images and query records loaded from a manifest directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = read_json(self.root / "manifest.json")
        if not isinstance(manifest, list):
            raise DataError("manifest must be a JSON array")
        self.gallery: Dict[str, np.ndarray] = {}
        self.gallery_class: Dict[str, str] = {}
        self.queries: List[QueryRecord] = []
        for rec in manifest:
            try:
                views = [read_rbim(self.root / p) for p in rec["view_paths"]]
                if rec["split"] == "gallery":
                    self.gallery[rec["id"]] = views[0]
                    self.gallery_class[rec["id"]] = rec["class_id"]
                else:
                    self.queries.append(QueryRecord(rec["id"], rec["class_id"], rec["split"], views))
            except KeyError as e:
                raise DataError(f"manifest record missing field {e}") from None
        if not self.gallery:
            raise DataError("manifest has no gallery entries")
        missing = {q.class_id for q in self.queries} - set(self.gallery_class.values())
        if missing:
            raise DataError(f"query classes absent from gallery: {sorted(missing)[:5]}")

    def split(self, name: str) -> List[QueryRecord]:
        if name == "all":
            return list(self.queries)
        return [q for q in self.queries if q.split == name]

    def query(self, qid: str) -> QueryRecord:
        for q in self.queries:
            if q.id == qid:
                return q
        raise DataError(f"unknown query {qid}")


# ------------------------------------------------------------------- models


@dataclass
class Models:
    extractor: ExtractorParams
    matcher: MatcherParams
    gate: Optional[GateParams] = None

    @classmethod
    def fresh(cls, seed: int = 0, S: int = 20) -> "Models":
        return cls(ExtractorParams.init(ExtractorConfig(), seed), MatcherParams.init(MatcherConfig(S=S), seed))

    @classmethod
    def load(cls, config: PipelineConfig, require_gate: bool = False) -> "Models":
        if not config.extractor_path or not config.matcher_path:
            raise ConfigError("extractor and matcher checkpoints are required")
        ex = ExtractorParams.from_checkpoint(read_json(config.extractor_path))
        ma = MatcherParams.from_checkpoint(read_json(config.matcher_path))
        gate = None
        if config.gate_path:
            gate = GateParams.from_checkpoint(read_json(config.gate_path))
        elif require_gate:
            raise ConfigError("gate checkpoint is required")
        return cls(ex, ma, gate)


# ----------------------------------------------------------------- pipeline


@dataclass
class QueryResult:
    ranking: Ranking
    stage1: Ranking
    use_3d: bool
    stage2_invoked: bool
    timing: Dict[str, float] = field(default_factory=dict)


class Pipeline:
    """Holds the gallery index and models; answers queries.

    ``score_cache`` memoizes stage-2 candidate scores per (query, reference);
    it is only valid while the matcher weights stay fixed.
    """

    def __init__(
        self,
        dataset: Dataset,
        models: Models,
        config: PipelineConfig = None,
        provider=None,
        fusion: FusionParams = None,
        oracle_labels: Optional[Mapping[str, int]] = None,
        cache_scores: bool = True,
    ):
        self.dataset = dataset
        self.models = models
        self.config = config or PipelineConfig()
        self.provider = provider or HandcraftedProvider()
        self.fusion = fusion
        self.oracle_labels = dict(oracle_labels) if oracle_labels is not None else None
        if self.oracle_labels is None and self.config.oracle_labels_path:
            self.oracle_labels = load_labels(self.config.oracle_labels_path)
        ids = sorted(dataset.gallery)
        refs = [self.provider.embed(dataset.gallery[i], i) for i in ids]
        self.index = build_index(refs, self.config.normalize, [dataset.gallery_class[i] for i in ids])
        self.scorer = PairScorer(models.extractor, models.matcher, dataset.gallery)
        self.cache_scores = cache_scores
        self._scores: Dict[Tuple[str, str], CandidateScore] = {}

    # stage 1 ---------------------------------------------------------------

    def embed(self, q: QueryRecord) -> Embedding:
        embs = [self.provider.embed(v, f"{q.id}/{i}") for i, v in enumerate(q.views)]
        if len(embs) == 1:
            return Embedding(embs[0].vector, q.id)
        fusion = self.fusion or FusionParams.identity_average(embs[0].vector.shape[0])
        fused = fuse_multiview(embs, fusion, q.id)
        if self.config.normalize:
            fused = Embedding(l2_normalize(fused.vector), q.id, 3)
        return fused

    def stage1(self, q: QueryRecord, emb: Embedding = None) -> Ranking:
        return rank_stage1(emb or self.embed(q), self.index)

    # stage 2 ---------------------------------------------------------------

    def candidate_scores(self, q: QueryRecord, ref_ids: Sequence[str]) -> List[CandidateScore]:
        if not self.cache_scores:
            return self.scorer.score(q.view_items(), ref_ids)
        todo = [r for r in ref_ids if (q.id, r) not in self._scores]
        if todo:
            for s in self.scorer.score(q.view_items(), todo):
                self._scores[(q.id, s.candidate_id)] = s
        return [self._scores[(q.id, r)] for r in ref_ids]

    def stage2(self, q: QueryRecord, stage1: Ranking, K: int = None) -> Ranking:
        K = min(K or self.config.K, len(stage1))
        scores = self.candidate_scores(q, stage1.ids[:K])
        return rerank(stage1, scores, K)

    def decide(self, q: QueryRecord, emb: Embedding, mode: str) -> bool:
        if mode == "2d":
            return False
        if mode == "3d":
            return True
        if mode == "oracle":
            if self.oracle_labels is None:
                raise ConfigError("oracle gate needs a label file")
            if q.id not in self.oracle_labels:
                raise DataError(f"no oracle label for {q.id}")
            return bool(self.oracle_labels[q.id])
        if self.models.gate is None:
            raise ConfigError("gated mode needs a gate checkpoint")
        return gate_decide(emb, self.models.gate, self.config.gate_threshold)

    def identify(self, q: QueryRecord, mode: str = None, K: int = None) -> QueryResult:
        mode = mode or self.config.mode
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        t0 = time.perf_counter()
        emb = self.embed(q)
        s1 = self.stage1(q, emb)
        t1 = time.perf_counter()
        use_3d = self.decide(q, emb, mode)
        t2 = time.perf_counter()
        final = self.stage2(q, s1, K) if use_3d else s1
        t3 = time.perf_counter()
        timing = {"stage1": t1 - t0, "gate": t2 - t1, "stage2": t3 - t2}
        return QueryResult(final, s1, use_3d, use_3d, timing)


def load_labels(path) -> Dict[str, int]:
    data = read_json(path)
    labels = data.get("labels", data) if isinstance(data, dict) else None
    if not isinstance(labels, dict):
        raise DataError(f"{path}: expected a label mapping")
    return {k: int(v["y"] if isinstance(v, dict) else v) for k, v in labels.items()}


# --------------------------------------------------------------- evaluation


def rank_of(ranking: Ranking, true_class: str) -> Optional[int]:
    rr = reciprocal_rank(ranking, true_class)
    return int(round(1.0 / rr)) if rr > 0 else None


def evaluate(pipeline: Pipeline, queries: Sequence[QueryRecord], mode: str = None, K: int = None) -> dict:
    """Metrics plus a per-query audit trail; timings are kept under ``timing``."""
    if not queries:
        raise DataError("evaluation split is empty")
    mode = mode or pipeline.config.mode
    K = K or pipeline.config.K
    finals, truths, records = [], [], []
    timing = {"stage1": 0.0, "gate": 0.0, "stage2": 0.0}
    for q in queries:
        res = pipeline.identify(q, mode, K)
        finals.append(res.ranking)
        truths.append(q.class_id)
        for k, v in res.timing.items():
            timing[k] += v
        records.append(
            {
                "query_id": q.id,
                "true_class": q.class_id,
                "rank_before": rank_of(res.stage1, q.class_id),
                "rank_after": rank_of(res.ranking, q.class_id),
                "gate_decision": res.use_3d,
                "stage2_invoked": res.stage2_invoked,
            }
        )
    invoked = sum(r["stage2_invoked"] for r in records)
    report = {
        "mode": mode,
        "K": K,
        "queries": len(queries),
        "recall": {str(k): recall_at_k(finals, truths, k) for k in (1, 2, 3)},
        "mrr": mean_reciprocal_rank(finals, truths),
        "stage2_invocations": invoked,
        "positive_decisions": sum(r["gate_decision"] for r in records),
        "per_query": records,
        "timing": timing,
    }
    return report


def recall_from_records(records: Sequence[dict], k: int) -> float:
    return sum(r["rank_after"] is not None and r["rank_after"] <= k for r in records) / len(records)


def stage1_recall_curve(pipeline: Pipeline, queries: Sequence[QueryRecord], Ks: Sequence[int]) -> Dict[int, float]:
    rankings = [pipeline.stage1(q) for q in queries]
    truths = [q.class_id for q in queries]
    return {K: recall_at_k(rankings, truths, K) for K in Ks}


def sweep_k(pipeline: Pipeline, queries: Sequence[QueryRecord], Ks: Sequence[int], mode: str = "gated") -> List[dict]:
    """Recall vs candidate-pool size (stage-1 ceiling and end-to-end)."""
    ceiling = stage1_recall_curve(pipeline, queries, Ks)
    rows = []
    for K in Ks:
        rep = evaluate(pipeline, queries, mode, K)
        rows.append(
            {
                "K": K,
                "stage1_recall_at_K": ceiling[K],
                "recall@1": rep["recall"]["1"],
                "recall@2": rep["recall"]["2"],
                "recall@3": rep["recall"]["3"],
            }
        )
    return rows


def bench_latency(
    dataset: Dataset,
    models: Models,
    queries: Sequence[QueryRecord],
    config: PipelineConfig = None,
    repetitions: int = 1,
    Ks: Sequence[int] = (4,),
) -> List[dict]:
    """Per-sample wall time for 2D-only, unconditional 3D and gated runs.

    Every repetition rebuilds the pipeline so no stage-2 work is cached.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    config = config or PipelineConfig()
    rows = []
    for K in Ks:
        for name, mode in (("2d-only", "2d"), ("unconditional-3d", "3d"), ("gated", "gated")):
            per_rep = []
            invoked = 0
            for _ in range(repetitions):
                pipe = Pipeline(dataset, models, config, cache_scores=False)
                pipe.scorer.cache_keypoints = False
                t0 = time.perf_counter()
                invoked = 0
                for q in queries:
                    invoked += pipe.identify(q, mode, K).stage2_invoked
                per_rep.append((time.perf_counter() - t0) / len(queries))
            rows.append(
                {
                    "config": name,
                    "K": K,
                    "mean_s": float(np.mean(per_rep)),
                    "std_s": float(np.std(per_rep)),
                    "invocation_fraction": invoked / len(queries),
                }
            )
    return rows


# ---------------------------------------------------------------- training


def matcher_samples(
    pipeline: Pipeline, queries: Sequence[QueryRecord], K: int, negatives: int = 3, pool: bool = True
) -> List[TrainingSample]:
    out = []
    for q in queries:
        cands = select_candidates(pipeline.stage1(q), q.class_id, K, negatives, pool)
        out.append(TrainingSample(q.id, q.view_items(), cands))
    return out


def run_train_matcher(pipeline: Pipeline, queries: Sequence[QueryRecord], cfg: MatcherTrainConfig = None):
    """Train adapters + heads; installs the result in ``pipeline``. Returns stats."""
    cfg = cfg or MatcherTrainConfig(seed=pipeline.config.seed)
    samples = matcher_samples(pipeline, queries, pipeline.config.K, cfg.negatives)
    pipeline.scorer.cache_inputs = True
    try:
        params, stats = train_matcher_adapters(samples, pipeline.scorer, cfg)
    finally:
        pipeline.scorer.cache_inputs = False
        pipeline.scorer.clear_inputs()
    install_matcher(pipeline, params)
    return params, stats


def install_matcher(pipeline: Pipeline, params: MatcherParams) -> None:
    pipeline.models.matcher = params
    pipeline.scorer.matcher = params
    pipeline._scores.clear()


def compute_labels(pipeline: Pipeline, queries: Sequence[QueryRecord], K: int = None) -> List[GateLabel]:
    """Run stage 2 unconditionally and label each query by its reciprocal-rank change."""
    labels = []
    for q in queries:
        s1 = pipeline.stage1(q)
        s2 = pipeline.stage2(q, s1, K)
        labels.append(m3at_label(s1, s2, q.class_id))
    return labels


def labels_to_json(labels: Sequence[GateLabel]) -> dict:
    return {
        "labels": {l.query_id: {"y": l.y, "rr_before": l.rr_before, "rr_after": l.rr_after} for l in labels},
        "positives": sum(l.y for l in labels),
        "count": len(labels),
    }


def run_m3at_workflow(pipeline: Pipeline, queries: Sequence[QueryRecord], cfg: GateTrainConfig = None):
    """Label training queries with an unconditional stage-2 pass, then fit the gate.

    Returns ``(gate, labels, final_loss)`` and installs the gate in ``pipeline``.
    """
    if pipeline.models.matcher is None:
        raise ConfigError("a trained matcher is required")
    cfg = cfg or GateTrainConfig(seed=pipeline.config.seed)
    labels = compute_labels(pipeline, queries)
    pos = sum(l.y for l in labels)
    log.info("gate labels: %d positive / %d", pos, len(labels))
    if pos == 0:
        warnings.warn("stage 2 never improved a training query; every gate label is negative")
    feats = [pipeline.embed(q) for q in queries]
    gate, loss = train_gate(feats, labels, cfg)
    pipeline.models.gate = gate
    return gate, labels, loss
