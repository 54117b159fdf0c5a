"""Keypoint-correspondence matcher used to re-rank stage-1 candidates.

For one query/reference pair: keypoint features are bilinearly sampled from
the query feature map, correlated against every reference cell, and turned
into point-match tokens (feature + local correlation window). Tokens go
through rounds of self-attention, cross-attention to the reference cells and a
feed-forward block with a parallel bottleneck adapter. Heads emit a
coordinate offset on top of the correlation soft-argmax and a confidence in
[0, 1]; a candidate's score is the mean confidence.

Only the adapters and the two heads are trainable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import accumulate, attention_block, ffn, init_attention, init_ffn, init_linear, lin
from .errors import DataError, NumericalError, ShapeError
from .features import ExtractorParams, FeatureMap, extract_batch
from .keypoints import Keypoint, detect_keypoints
from .numerics import (
    SGD,
    LinearParams,
    SGDConfig,
    check_finite,
    gelu,
    layer_norm,
    linear,
    log_softmax_value,
    sigmoid,
    softmax_value,
)
from .retrieval import Ranking

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ types


@dataclass
class MatchSet:
    candidate_id: str
    sources: np.ndarray  # (S, 2) x, y
    predicted: np.ndarray  # (S, 2) x_hat, y_hat
    confidences: np.ndarray  # (S,)

    def __len__(self) -> int:
        return len(self.confidences)


@dataclass
class CandidateScore:
    candidate_id: str
    c_tilde: float
    per_view: List[float] = field(default_factory=list)


@dataclass
class AdapterParams:
    down: LinearParams
    up: LinearParams
    alpha: float = 1.0


@dataclass
class MatcherConfig:
    S: int = 20
    iterations: int = 2
    heads: int = 2
    alpha: float = 1.0
    tau: float = 0.1
    d3: int = 32
    stride: int = 4
    window: int = 7
    adapter_dim: int = 8
    ffn_hidden: int = 64
    use_adapters: bool = True
    corr_temperature: float = 0.02
    window_scale: float = 4.0
    width: int = 96
    residual_scale: float = 0.1

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def is_trainable(name: str) -> bool:
    return name.startswith("head.") or ".adapter." in name


@dataclass
class MatcherParams:
    config: MatcherConfig
    arrays: Dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def init(cls, config: MatcherConfig = None, seed: int = 0) -> "MatcherParams":
        config = config or MatcherConfig()
        rng = np.random.default_rng([seed, 0x4D])
        a: Dict[str, np.ndarray] = {}
        d = config.width
        init_linear(a, rng, "embed", config.d3 + config.window**2, d)
        for i in range(config.iterations):
            init_attention(a, rng, f"iter.{i}.self", d)
            cross = f"iter.{i}.cross"
            init_linear(a, rng, cross + ".wq", d, d)
            init_linear(a, rng, cross + ".wk", config.d3, d)
            init_linear(a, rng, cross + ".wv", config.d3, d)
            init_linear(a, rng, cross + ".wo", d, d)
            init_ffn(a, rng, f"iter.{i}.ffn", d, config.ffn_hidden)
            # small frozen branches keep the embedded correlation cues dominant in the residual stream
            for name in (f"iter.{i}.self.wo", cross + ".wo", f"iter.{i}.ffn.w2"):
                for part in (".weight", ".bias"):
                    a[name + part] = (a[name + part] * np.float32(config.residual_scale)).astype(np.float32)
            init_linear(a, rng, f"iter.{i}.adapter.down", d, config.adapter_dim)
            # zero up-projection: an untrained adapter leaves the frozen path untouched
            init_linear(a, rng, f"iter.{i}.adapter.up", config.adapter_dim, d, zero=True)
        init_linear(a, rng, "head.coord", d, 2)
        init_linear(a, rng, "head.conf", d, 1)
        return cls(config, a, seed)

    def trainable(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if is_trainable(k)}

    def with_arrays(self, update: Dict[str, np.ndarray]) -> "MatcherParams":
        return MatcherParams(self.config, {**self.arrays, **update}, self.seed)

    def adapter(self, i: int) -> AdapterParams:
        return AdapterParams(
            lin(self.arrays, f"iter.{i}.adapter.down"), lin(self.arrays, f"iter.{i}.adapter.up"), self.config.alpha
        )

    def zero_heads(self) -> "MatcherParams":
        return self.with_arrays({k: np.zeros_like(v) for k, v in self.arrays.items() if k.startswith("head.")})

    def to_checkpoint(self) -> dict:
        return {
            "format": "matcher-v1",
            "config": self.config.as_dict(),
            "seed": self.seed,
            "adapters": {"enabled": self.config.use_adapters, "alpha": self.config.alpha, "dim": self.config.adapter_dim},
            "weights": {k: v.tolist() for k, v in sorted(self.arrays.items())},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "MatcherParams":
        if ckpt.get("format") != "matcher-v1":
            raise DataError(f"not a matcher-v1 checkpoint: {ckpt.get('format')!r}")
        arrays = {k: np.asarray(v, np.float32) for k, v in ckpt["weights"].items()}
        return cls(MatcherConfig(**ckpt["config"]), arrays, ckpt.get("seed", 0))


# ------------------------------------------------------ sampling / correlation


def bilinear_sample(fmap: FeatureMap, point: Keypoint) -> np.ndarray:
    """Feature at a pixel location; grid coordinate = pixel / stride, borders clamped."""
    h, w, _ = fmap.values.shape
    W, H = w * fmap.stride, h * fmap.stride
    if not (0 <= point.x < W and 0 <= point.y < H):
        raise DataError(f"keypoint ({point.x}, {point.y}) outside {W}x{H} image")
    return sample_points(fmap.values, np.array([[point.x, point.y]]), fmap.stride)[0]


def sample_points(grid: np.ndarray, points: np.ndarray, stride: int) -> np.ndarray:
    """Vectorized bilinear sampling of (h, w, d) at pixel points (n, 2)."""
    h, w, _ = grid.shape
    gx = np.clip(points[:, 0] / stride, 0.0, w - 1.0)
    gy = np.clip(points[:, 1] / stride, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[:, None].astype(grid.dtype)
    fy = (gy - y0)[:, None].astype(grid.dtype)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def correlate(kp_feature: np.ndarray, reference: FeatureMap) -> np.ndarray:
    """Raw inner product of one feature with every reference cell -> (h, w)."""
    kp_feature = np.asarray(kp_feature)
    h, w, d = reference.values.shape
    if kp_feature.shape != (d,):
        raise ShapeError(f"feature dim {kp_feature.shape} does not match map dim {d}")
    return reference.values @ kp_feature


def soft_argmax(corr: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Expected (x, y) grid coordinate under softmax(corr / T); corr is (..., h, w)."""
    h, w = corr.shape[-2:]
    p = softmax_value(corr.reshape(corr.shape[:-2] + (h * w,)) / temperature)
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([p @ xs.astype(p.dtype), p @ ys.astype(p.dtype)], axis=-1)


def correlation_windows(corr: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Flattened size x size windows of corr (..., h, w) around integer (x, y) centres; zero padded."""
    h, w = corr.shape[-2:]
    r = size // 2
    lead = corr.shape[:-2]
    padded = np.zeros(lead + (h + 2 * r, w + 2 * r), corr.dtype)
    padded[..., r : r + h, r : r + w] = corr
    cx = centers[..., 0].astype(int)
    cy = centers[..., 1].astype(int)
    off = np.arange(size)
    rows = (cy[..., None] + off)[..., :, None]
    cols = (cx[..., None] + off)[..., None, :]
    flat = padded.reshape(-1, h + 2 * r, w + 2 * r)
    idx = np.arange(flat.shape[0]).reshape(lead)[..., None, None]
    return flat[idx, rows, cols].reshape(lead + (size * size,))


# ---------------------------------------------------------------- adapters


def adapter_forward(x_prime: np.ndarray, base_ffn: Callable, params: AdapterParams):
    """``FFN(LN(x')) + alpha * GELU(LN(x') W_down) W_up + x'``.

    ``base_ffn(u)`` returns ``(y, backward)``. The closure returns
    ``(dx', {"down.weight", "down.bias", "up.weight", "up.bias"})``.
    """
    x_prime = np.asarray(x_prime)
    if params.down.in_dim != x_prime.shape[-1]:
        raise ShapeError("adapter input dim does not match W_down")
    n, b_ln = layer_norm(x_prime)
    f, b_f = base_ffn(n)
    if f.shape != x_prime.shape or params.up.out_dim != f.shape[-1]:
        raise ShapeError("adapter output dim does not match the FFN output")
    z, b_down = linear(n, params.down)
    g, b_g = gelu(z)
    a, b_up = linear(g, params.up)
    alpha = np.asarray(params.alpha, x_prime.dtype)
    out = f + alpha * a + x_prime

    def backward(dout):
        da = alpha * dout
        dg, g_up = b_up(da)
        dn_a, g_down = b_down(b_g(dg))
        dn_f, _ = b_f(dout)
        dx = dout + b_ln(dn_a + dn_f)
        grads = {"down." + k: v for k, v in g_down.items()}
        grads.update({"up." + k: v for k, v in g_up.items()})
        return dx, grads

    return out, backward


# --------------------------------------------------------------- refinement


@dataclass
class MatcherInputs:
    """Everything the trainable part needs for one (query view, candidates) batch."""

    keypoints: np.ndarray  # (S, 2) pixels
    kp_features: np.ndarray  # (B, S, d)
    correlations: np.ndarray  # (B, S, h, w)
    reference_cells: np.ndarray  # (B, h*w, d)
    candidate_ids: List[str]

    def take(self, idx: Sequence[int]) -> "MatcherInputs":
        idx = list(idx)
        return MatcherInputs(
            self.keypoints,
            self.kp_features[idx],
            self.correlations[idx],
            self.reference_cells[idx],
            [self.candidate_ids[i] for i in idx],
        )


def build_inputs(keypoints: np.ndarray, fq: np.ndarray, fr: np.ndarray, stride: int, candidate_ids) -> MatcherInputs:
    """fq, fr: (B, h, w, d) query / reference maps of B jointly extracted pairs."""
    B, h, w, d = fr.shape
    kf = np.stack([sample_points(fq[b], keypoints, stride) for b in range(B)])
    corr = np.einsum("bsd,bhwd->bshw", kf, fr, optimize=True)
    return MatcherInputs(keypoints, kf, corr, fr.reshape(B, h * w, d), list(candidate_ids))


def refine_forward(inp: MatcherInputs, params: MatcherParams):
    """Run the matcher on a batch; returns ``(xy, conf, backward)``.

    ``xy`` is (B, S, 2) pixels and ``conf`` (B, S). ``backward(dconf, dxy=None)``
    returns gradients for the trainable arrays only.
    """
    cfg = params.config
    a = params.arrays
    corr = inp.correlations
    B, S, h, w = corr.shape
    d = cfg.d3
    if inp.kp_features.shape[-1] != d:
        raise ShapeError("keypoint feature dim does not match the matcher")
    sa = soft_argmax(corr, cfg.corr_temperature)  # (B, S, 2) grid units
    centers = np.clip(np.rint(sa), 0, [w - 1, h - 1])
    win = correlation_windows(corr, centers, cfg.window) * np.float32(cfg.window_scale / d)
    x0 = np.concatenate([inp.kp_features, win.astype(inp.kp_features.dtype)], axis=-1)
    t, _ = linear(x0, lin(a, "embed"))
    ref = inp.reference_cells
    backs = []
    for i in range(cfg.iterations):
        t, b_self = attention_block(t, None, a, f"iter.{i}.self", cfg.heads)
        t, b_cross = attention_block(t, ref, a, f"iter.{i}.cross", cfg.heads)
        base = lambda u, i=i: ffn(u, a, f"iter.{i}.ffn")
        if cfg.use_adapters:
            t, b_ffn = adapter_forward(t, base, params.adapter(i))
        else:
            t, b_ffn = _plain_ffn(t, base)
        backs.append((b_self, b_cross, b_ffn))
    tn, b_ln = layer_norm(t)
    off, b_coord = linear(tn, lin(a, "head.coord"))
    logit, b_conf = linear(tn, lin(a, "head.conf"))
    conf, b_sig = sigmoid(logit[..., 0])
    xy = sa * np.float32(cfg.stride) + off
    if not (np.all(np.isfinite(conf)) and np.all(np.isfinite(xy))):
        raise NumericalError("non-finite matcher activations")

    def backward(dconf, dxy=None):
        grads: Dict[str, np.ndarray] = {}
        dlogit = b_sig(dconf)[..., None]
        dtn, g = b_conf(dlogit)
        accumulate(grads, "head.conf", g)
        if dxy is None:
            dxy = np.zeros_like(xy)
        dtn_c, g = b_coord(dxy)
        accumulate(grads, "head.coord", g)
        dt = b_ln(dtn + dtn_c)
        for i in reversed(range(cfg.iterations)):
            b_self, b_cross, b_ffn = backs[i]
            dt, g = b_ffn(dt)
            if cfg.use_adapters:
                accumulate(grads, f"iter.{i}.adapter", g)
            dt, _, _ = b_cross(dt)
            dt, _, _ = b_self(dt)
        return {k: v for k, v in grads.items() if is_trainable(k)}

    return xy, conf, backward


def _plain_ffn(x, base):
    n, b_ln = layer_norm(x)
    f, b_f = base(n)
    out = f + x

    def backward(dout):
        dn, _ = b_f(dout)
        return dout + b_ln(dn), {}

    return out, backward


def refine_matches(correlations, kp_features, reference: FeatureMap, params: MatcherParams, keypoints=None, candidate_id: str = "") -> MatchSet:
    """Single-pair wrapper: ``correlations`` (S, h, w), ``kp_features`` (S, d)."""
    corr = np.asarray(correlations)
    S = corr.shape[0]
    if S < 1:
        raise DataError("need at least one keypoint")
    h, w, d = reference.values.shape
    kps = np.zeros((S, 2), np.float32) if keypoints is None else np.asarray(keypoints, np.float32)
    inp = MatcherInputs(kps, np.asarray(kp_features)[None], corr[None], reference.values.reshape(1, h * w, d), [candidate_id])
    xy, conf, _ = refine_forward(inp, params)
    return MatchSet(candidate_id, kps, xy[0], conf[0])


# ------------------------------------------------------------------ scoring


def similarity_score(matches: MatchSet) -> CandidateScore:
    if len(matches) == 0:
        raise DataError("empty match set")
    return CandidateScore(matches.candidate_id, float(np.mean(np.asarray(matches.confidences, np.float64))))


def multiview_score(per_view: Sequence[CandidateScore]) -> CandidateScore:
    if not per_view:
        raise DataError("need at least one view score")
    vals = [s.c_tilde for s in per_view]
    return CandidateScore(per_view[0].candidate_id, float(np.mean(vals)), vals)


def rerank(stage1: Ranking, scores: Sequence[CandidateScore], K: int) -> Ranking:
    """Reorder the top-K block by score (stable w.r.t. stage-1 order); keep the tail."""
    K = min(K, len(stage1))
    head = stage1.ids[:K]
    by_id = {s.candidate_id: s.c_tilde for s in scores}
    if len(scores) != K or set(by_id) != set(head):
        raise DataError("scores must cover exactly the stage-1 top-K candidates")
    order = sorted(range(K), key=lambda i: -by_id[head[i]])
    ids = [head[i] for i in order] + stage1.ids[K:]
    new_scores = [by_id[head[i]] for i in order] + stage1.scores[K:]
    classes = [stage1.classes[i] for i in order] + stage1.classes[K:] if stage1.classes else []
    return Ranking(stage1.query_id, ids, new_scores, classes)


# ------------------------------------------------------------- pair scoring


class PairScorer:
    """Scores query views against reference candidates with frozen weights.

    ``gallery`` maps reference id -> image (H, W, 3). Keypoints per query
    view are cached; ``input_cache`` optionally memoizes matcher inputs,
    which depend only on the frozen extractor.
    """

    def __init__(self, extractor: ExtractorParams, matcher: MatcherParams, gallery, detector=None, cache_inputs=False):
        self.extractor = extractor
        self.matcher = matcher
        self.gallery = gallery
        self.detector = detector or detect_keypoints
        self.cache_inputs = cache_inputs
        self.cache_keypoints = True
        self._kp: Dict[str, np.ndarray] = {}
        self._inputs: Dict[Tuple[str, Tuple[str, ...]], MatcherInputs] = {}

    def clear_inputs(self) -> None:
        self._inputs.clear()

    def keypoints(self, view_key: str, image: np.ndarray) -> np.ndarray:
        kp = self._kp.get(view_key) if self.cache_keypoints else None
        if kp is None:
            kps = self.detector(image, self.matcher.config.S)
            kp = np.array([[k.x, k.y] for k in kps], np.float32)
            if self.cache_keypoints:
                self._kp[view_key] = kp
        return kp

    def inputs(self, view_key: str, image: np.ndarray, ref_ids: Sequence[str]) -> MatcherInputs:
        key = (view_key, tuple(ref_ids))
        if self.cache_inputs and key in self._inputs:
            return self._inputs[key]
        kp = self.keypoints(view_key, image)
        refs = np.stack([self.gallery[r] for r in ref_ids])
        pair = np.stack([np.broadcast_to(image, refs.shape), refs], axis=1)
        feats = extract_batch(pair, self.extractor)
        inp = build_inputs(kp, feats[:, 0], feats[:, 1], self.extractor.config.stride, ref_ids)
        if self.cache_inputs:
            self._inputs[key] = inp
        return inp

    def score(self, views: Sequence[Tuple[str, np.ndarray]], ref_ids: Sequence[str], params: MatcherParams = None) -> List[CandidateScore]:
        """Mean-confidence score per candidate, averaged over query views."""
        params = params or self.matcher
        per_view = []
        for key, img in views:
            _, conf, _ = refine_forward(self.inputs(key, img, ref_ids), params)
            per_view.append(conf.astype(np.float64).mean(axis=1))
        out = []
        for j, rid in enumerate(ref_ids):
            vs = [CandidateScore(rid, float(pv[j])) for pv in per_view]
            out.append(multiview_score(vs))
        return out


# ----------------------------------------------------------------- training


@dataclass
class MatcherTrainConfig:
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.0
    tau: Optional[float] = None
    seed: int = 0
    negatives: int = 3


@dataclass
class TrainingSample:
    query_id: str
    views: List[Tuple[str, np.ndarray]]
    candidates: List[str]  # positive first, then the negative pool


def select_candidates(
    ranking: Ranking, true_class: str, K: int, negatives: int = 3, pool: bool = False
) -> Optional[List[str]]:
    """Highest-ranked correct candidate plus incorrect ones from the top-K.

    Returns the top ``negatives`` incorrect ids, or every incorrect id in the
    top-K when ``pool`` is set; None without a positive or enough negatives.
    """
    top = ranking.top(K)
    pos = [i for i, c in zip(top.ids, top.classes) if c == true_class]
    neg = [i for i, c in zip(top.ids, top.classes) if c != true_class]
    if not pos or len(neg) < negatives:
        return None
    return [pos[0]] + (neg if pool else neg[:negatives])


def candidate_loss(inputs: Sequence[MatcherInputs], params: MatcherParams, tau: float):
    """Cross-entropy of softmax(C~ / tau) against the first candidate.

    ``inputs`` holds one batch per query view, all over the same candidates.
    Returns ``(loss, grads, c_tilde)``.
    """
    V = len(inputs)
    runs = [refine_forward(inp, params) for inp in inputs]
    S = runs[0][1].shape[1]
    c = sum(conf.astype(np.float64).mean(axis=1) for _, conf, _ in runs) / V
    logits = c / tau
    logp = log_softmax_value(logits)
    loss = float(-logp[0])
    dlogits = np.exp(logp)
    dlogits[0] -= 1.0
    dc = dlogits / tau
    grads: Dict[str, np.ndarray] = {}
    for xy, conf, back in runs:
        dconf = np.repeat((dc / (V * S))[:, None], S, axis=1).astype(conf.dtype)
        for k, v in back(dconf).items():
            grads[k] = grads[k] + v if k in grads else v
    return loss, grads, c


def train_matcher_adapters(
    samples: Sequence[TrainingSample],
    scorer: PairScorer,
    cfg: MatcherTrainConfig = None,
) -> Tuple[MatcherParams, dict]:
    """Fit adapters and heads on 1-positive / N-negative candidate groups.

    Each sample carries a positive and a pool of negatives; every epoch draws
    ``cfg.negatives`` of them afresh (seeded). Frozen extractor and base
    matcher weights are never touched. Returns the trained params and a stats
    dict (losses per epoch, skipped count).
    """
    cfg = cfg or MatcherTrainConfig()
    params = scorer.matcher
    tau = cfg.tau if cfg.tau is not None else params.config.tau
    usable = [s for s in samples if s.candidates is not None and len(s.candidates) > cfg.negatives]
    skipped = len(samples) - len(usable)
    if not usable:
        raise DataError("no query has a positive and enough negatives in its candidate pool")
    if skipped:
        log.info("skipped %d queries without a positive and %d negatives", skipped, cfg.negatives)
    batches = [[scorer.inputs(k, img, s.candidates) for k, img in s.views] for s in usable]
    trainable = params.trainable()
    opt = SGD(cfg.lr, SGDConfig(momentum=cfg.momentum))
    rng = np.random.default_rng([cfg.seed, 0x7A])
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in rng.permutation(len(batches)):
            pool = len(usable[idx].candidates) - 1
            pick = [0] + sorted((rng.choice(pool, cfg.negatives, replace=False) + 1).tolist())
            group = [inp.take(pick) for inp in batches[idx]]
            loss, grads, _ = candidate_loss(group, params, tau)
            if not np.isfinite(loss):
                raise NumericalError("matcher training loss became non-finite")
            trainable = opt.step(trainable, grads)
            params = params.with_arrays(trainable)
            total += loss
        history.append(total / len(batches))
    return params, {"losses": history, "skipped": skipped, "used": len(usable)}
