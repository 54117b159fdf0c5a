"""Stage-1 retrieval: gallery index, dot-product ranking, view fusion, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, ShapeError
from .numerics import LinearParams, linear

EMBED_DIM = 64
GRID = 4
ORIENT_BINS = 16
HIST_GAIN = 8.0


@dataclass
class Embedding:
    vector: np.ndarray
    source_id: str
    view_count: int = 1

    def __post_init__(self):
        self.vector = np.asarray(self.vector, np.float32)
        if self.vector.ndim != 1:
            raise ShapeError("embedding must be a vector")
        if not np.all(np.isfinite(self.vector)):
            raise DataError(f"embedding {self.source_id} has non-finite values")


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, np.float32)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, np.float32(1e-12))


@dataclass(frozen=True)
class GalleryIndex:
    """Reference embeddings stored sorted by reference id."""

    ids: Tuple[str, ...]
    classes: Tuple[str, ...]
    matrix: np.ndarray
    normalize: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def class_of(self, reference_id: str) -> str:
        return self.classes[self.ids.index(reference_id)]


def build_index(
    references: Sequence[Embedding], normalize: bool = True, classes: Optional[Sequence[str]] = None
) -> GalleryIndex:
    """Build an index; ``classes`` defaults to the reference ids themselves."""
    if not references:
        raise DataError("cannot index an empty gallery")
    dims = {r.vector.shape[0] for r in references}
    if len(dims) != 1:
        raise ShapeError(f"mixed embedding dims in gallery: {sorted(dims)}")
    ids = [r.source_id for r in references]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate reference id in gallery")
    classes = list(classes) if classes is not None else ids
    if len(classes) != len(ids):
        raise DataError("classes and references differ in length")
    if len(set(classes)) != len(classes):
        raise DataError("gallery class ids must be unique per entry")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    mat = np.stack([references[i].vector for i in order]).astype(np.float32)
    if normalize:
        mat = l2_normalize(mat)
    mat.setflags(write=False)
    return GalleryIndex(tuple(ids[i] for i in order), tuple(classes[i] for i in order), mat, normalize)


@dataclass
class Ranking:
    """Ordered candidates; ``classes[i]`` is the class of ``ids[i]``."""

    query_id: str
    ids: List[str]
    scores: List[float]
    classes: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def entries(self) -> List[Tuple[str, float]]:
        return list(zip(self.ids, self.scores))

    def top(self, k: int) -> "Ranking":
        return Ranking(self.query_id, self.ids[:k], self.scores[:k], self.classes[:k])

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "ids": self.ids, "scores": self.scores, "classes": self.classes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Ranking":
        return cls(d["query_id"], list(d["ids"]), [float(s) for s in d["scores"]], list(d.get("classes", [])))


def rank_stage1(query: Embedding, index: GalleryIndex, limit: Optional[int] = None) -> Ranking:
    """Top-``limit`` references by dot product, ties broken by ascending id."""
    if query.vector.shape[0] != index.dim:
        raise ShapeError(f"query dim {query.vector.shape[0]} != index dim {index.dim}")
    limit = len(index) if limit is None else limit
    if limit < 1:
        raise ValueError("limit must be >= 1")
    q = l2_normalize(query.vector) if index.normalize else query.vector
    scores = index.matrix @ q
    # index rows are id-sorted, so a stable sort breaks ties by id
    order = np.argsort(-scores, kind="stable")[:limit]
    return Ranking(
        query.source_id,
        [index.ids[i] for i in order],
        [float(scores[i]) for i in order],
        [index.classes[i] for i in order],
    )


# ------------------------------------------------------------------ fusion


@dataclass
class FusionParams:
    linear: LinearParams

    @classmethod
    def identity_average(cls, dim: int = EMBED_DIM) -> "FusionParams":
        eye = np.eye(dim, dtype=np.float32) / np.float32(3.0)
        return cls(LinearParams(np.concatenate([eye, eye, eye], axis=0), np.zeros(dim, np.float32)))


def fuse_multiview(views: Sequence[Embedding], params: FusionParams, source_id: Optional[str] = None) -> Embedding:
    """Concatenate three view embeddings and map 3d -> d."""
    if len(views) != 3:
        raise ShapeError(f"multi-view fusion expects 3 views, got {len(views)}")
    dims = {v.vector.shape[0] for v in views}
    if len(dims) != 1:
        raise ShapeError("view embeddings differ in dimension")
    x = np.concatenate([v.vector for v in views])
    y, _ = linear(x, params.linear)
    return Embedding(y, source_id or views[0].source_id, view_count=3)


# ----------------------------------------------------------------- metrics


def reciprocal_rank(ranking: Ranking, true_class: str) -> float:
    for pos, c in enumerate(ranking.classes, start=1):
        if c == true_class:
            return 1.0 / pos
    return 0.0


def recall_at_k(rankings: Sequence[Ranking], truths: Sequence[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise ValueError("no rankings")
    hits = sum(t in r.classes[:k] for r, t in zip(rankings, truths))
    return hits / len(rankings)


def mean_reciprocal_rank(rankings: Sequence[Ranking], truths: Sequence[str]) -> float:
    return float(np.mean([reciprocal_rank(r, t) for r, t in zip(rankings, truths)]))


# ------------------------------------------------- handcrafted descriptor


def handcrafted_descriptor(image: np.ndarray) -> np.ndarray:
    """64-d appearance code: 4x4 mean-colour grid plus an orientation histogram.

    The colour grid is unit-normalized; the histogram holds mean gradient
    magnitude per orientation bin (so texture energy survives) before the
    concatenation is L2-normalized.
    """
    img = np.asarray(image, np.float32)
    h, w, _ = img.shape
    if h % GRID or w % GRID:
        raise ShapeError("image sides must be divisible by 4")
    grid = img.reshape(GRID, h // GRID, GRID, w // GRID, 3).mean(axis=(1, 3)).reshape(-1)
    grid = l2_normalize(grid)
    gray = img.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * ORIENT_BINS).astype(int), ORIENT_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=mag.ravel(), minlength=ORIENT_BINS) / mag.size
    vec = np.concatenate([grid, HIST_GAIN * hist.astype(np.float32)])
    return l2_normalize(vec)


class HandcraftedProvider:
    """Default embedding provider for synthetic images."""

    dim = EMBED_DIM

    def embed(self, image: np.ndarray, source_id: str) -> Embedding:
        return Embedding(handcrafted_descriptor(image), source_id)


class FileProvider:
    """Embeddings loaded from an ``RBE1`` file, looked up by id."""

    def __init__(self, table: Mapping[str, np.ndarray]):
        self.table: Dict[str, np.ndarray] = dict(table)
        self.dim = next(iter(self.table.values())).shape[0] if self.table else 0

    def embed(self, image, source_id: str) -> Embedding:
        try:
            return Embedding(self.table[source_id], source_id)
        except KeyError:
            raise DataError(f"no embedding stored for {source_id}") from None
