"""Awareness gate: predicts from a query embedding whether geometric re-ranking helps.

Labels come from reciprocal ranks before and after re-ranking; the classifier
is ``LN -> linear -> GELU -> linear`` trained with class-weighted cross-entropy.
Class index 1 means "re-ranking helps".
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .numerics import SGD, LinearParams, SGDConfig, gelu, layer_norm, linear, log_softmax_value, softmax_value
from .retrieval import Embedding, Ranking, reciprocal_rank

log = logging.getLogger(__name__)

POSITIVE = 1
GATE_HIDDEN = 64


@dataclass
class GateParams:
    hidden: LinearParams
    classifier: LinearParams
    seed: int = 0

    @property
    def d_2d(self) -> int:
        return self.hidden.in_dim

    @property
    def d_hidden(self) -> int:
        return self.hidden.out_dim

    @classmethod
    def init(cls, d_2d: int, d_hidden: int = GATE_HIDDEN, seed: int = 0) -> "GateParams":
        rng = np.random.default_rng(seed)
        return cls(LinearParams.init(rng, d_2d, d_hidden), LinearParams.init(rng, d_hidden, 2), seed)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {**self.hidden.arrays("hidden."), **self.classifier.arrays("classifier.")}

    @classmethod
    def from_dict(cls, arrays: Dict[str, np.ndarray], seed: int = 0) -> "GateParams":
        return cls(
            LinearParams(arrays["hidden.weight"], arrays.get("hidden.bias")),
            LinearParams(arrays["classifier.weight"], arrays.get("classifier.bias")),
            seed,
        )

    def to_checkpoint(self) -> dict:
        return {
            "format": "gate-v1",
            "d_2d": self.d_2d,
            "d_hidden": self.d_hidden,
            "seed": self.seed,
            "positive_class_index": POSITIVE,
            "weights": {k: v.tolist() for k, v in sorted(self.as_dict().items())},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "GateParams":
        if ckpt.get("format") != "gate-v1":
            raise DataError(f"not a gate-v1 checkpoint: {ckpt.get('format')!r}")
        if ckpt.get("positive_class_index", POSITIVE) != POSITIVE:
            raise DataError("unsupported positive class index")
        arrays = {k: np.asarray(v, np.float32) for k, v in ckpt["weights"].items()}
        params = cls.from_dict(arrays, ckpt.get("seed", 0))
        if params.d_2d != ckpt["d_2d"] or params.d_hidden != ckpt["d_hidden"]:
            raise DataError("gate checkpoint dims disagree with weights")
        return params


@dataclass
class GateLabel:
    query_id: str
    y: int
    rr_before: float
    rr_after: float


@dataclass
class GateTrainConfig:
    class_weights: Tuple[float, float] = (1.0, 4.0)
    lr: float = 0.05
    epochs: int = 400
    momentum: float = 0.9
    seed: int = 0
    d_hidden: int = GATE_HIDDEN

    def __post_init__(self):
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigError("class weights must be two positive numbers")


def gate_forward(q, params: GateParams):
    """Logits for one embedding (or a batch of them); returns ``(logits, backward)``.

    ``backward(dlogits)`` yields a dict of parameter gradients keyed like
    ``GateParams.as_dict``.
    """
    x = q.vector if isinstance(q, Embedding) else np.asarray(q)
    if x.shape[-1] != params.d_2d:
        raise ShapeError(f"gate expects dim {params.d_2d}, got {x.shape[-1]}")
    n, b_ln = layer_norm(x)
    pre, b_h = linear(n, params.hidden)
    h, b_g = gelu(pre)
    logits, b_c = linear(h, params.classifier)

    def backward(dlogits):
        dh, gc = b_c(dlogits)
        _, gh = b_h(b_g(dh))
        return {
            "hidden.weight": gh["weight"],
            "hidden.bias": gh["bias"],
            "classifier.weight": gc["weight"],
            "classifier.bias": gc["bias"],
        }

    return logits, backward


def m3at_label(rank_2d: Ranking, rank_3d: Ranking, true_class: str) -> GateLabel:
    """Positive iff the reciprocal rank strictly improves after re-ranking."""
    before = reciprocal_rank(rank_2d, true_class)
    after = reciprocal_rank(rank_3d, true_class)
    return GateLabel(rank_2d.query_id, int(after > before), before, after)


def weighted_cross_entropy(logits: np.ndarray, y: np.ndarray, weights: Sequence[float]):
    """``sum_i w_{y_i} * -log p_{y_i} / sum_i w_{y_i}``; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    y = np.asarray(y, int)
    w = np.asarray(weights, logits.dtype)[y]
    logp = log_softmax_value(logits)
    picked = logp[np.arange(len(y)), y]
    total = w.sum()
    loss = float(-(w * picked).sum() / total)
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    dlogits = (p - onehot) * (w / total)[:, None]
    return loss, dlogits


def gate_loss(params: GateParams, x: np.ndarray, y: np.ndarray, weights) -> Tuple[float, Dict[str, np.ndarray]]:
    logits, back = gate_forward(x, params)
    loss, dlogits = weighted_cross_entropy(logits, y, weights)
    return loss, back(dlogits)


def train_gate(
    features: Sequence[Embedding],
    labels: Sequence[GateLabel],
    cfg: Optional[GateTrainConfig] = None,
) -> Tuple[GateParams, float]:
    """Full-batch SGD on the weighted cross-entropy; returns ``(params, final_loss)``."""
    cfg = cfg or GateTrainConfig()
    if len(features) != len(labels) or not features:
        raise DataError("features and labels must be non-empty and aligned")
    for f, l in zip(features, labels):
        if f.source_id != l.query_id:
            raise DataError(f"feature {f.source_id} paired with label for {l.query_id}")
    x = np.stack([f.vector for f in features]).astype(np.float32)
    y = np.array([l.y for l in labels], int)
    if len(set(y.tolist())) < 2:
        warnings.warn(f"gate training set has a single class ({int(y[0])}); classifier will be degenerate")
    params = GateParams.init(x.shape[1], cfg.d_hidden, cfg.seed)
    arrays = params.as_dict()
    opt = SGD(cfg.lr, SGDConfig(momentum=cfg.momentum))
    loss = float("nan")
    for _ in range(cfg.epochs):
        loss, grads = gate_loss(GateParams.from_dict(arrays), x, y, cfg.class_weights)
        if not np.isfinite(loss):
            raise NumericalError("gate training loss became non-finite")
        arrays = opt.step(arrays, grads)
    final = GateParams.from_dict(arrays, cfg.seed)
    loss, _ = gate_loss(final, x, y, cfg.class_weights)
    pos = int(y.sum())
    log.info("gate trained on %d queries (%d positive), final loss %.4f", len(y), pos, loss)
    return final, loss


def gate_probability(q, params: GateParams) -> float:
    logits, _ = gate_forward(q, params)
    return float(softmax_value(np.asarray(logits, np.float64))[POSITIVE])


def decide_from_logits(logits, threshold: Optional[float] = None) -> bool:
    logits = np.asarray(logits, np.float64)
    if threshold is not None:
        return bool(softmax_value(logits)[POSITIVE] > threshold)
    # ties go to the cheap path
    return bool(logits[POSITIVE] > logits[1 - POSITIVE])


def gate_decide(q, params: GateParams, threshold: Optional[float] = None) -> bool:
    """True when stage two should run for this query."""
    logits, _ = gate_forward(q, params)
    return decide_from_logits(logits, threshold)
