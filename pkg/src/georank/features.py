"""Dense geometry-aware features from a set of views.

Patch tokens from every view run through blocks that alternate between
frame-wise attention (tokens of one view) and global attention (tokens of all
views together). The output is one feature grid per view. Weights are seeded
and frozen; there is no pretrained prior at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .blocks import attention_block, ffn_block, init_attention, init_ffn, init_linear, lin
from .errors import DataError, ShapeError
from .numerics import layer_norm, linear


@dataclass
class ImageView:
    values: np.ndarray
    view_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float32)
        if self.values.ndim != 3 or self.values.shape[2] != 3 or min(self.values.shape[:2]) < 1:
            raise ShapeError(f"image must be H x W x 3, got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureMap:
    values: np.ndarray  # (h, w, d)
    stride: int = 4
    view_id: str = ""

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def cells(self) -> np.ndarray:
        h, w, d = self.values.shape
        return self.values.reshape(h * w, d)


@dataclass
class ExtractorConfig:
    dim: int = 32
    heads: int = 2
    blocks: int = 4
    stride: int = 4
    ffn_hidden: int = 64
    pos_scale: float = 0.1

    def __post_init__(self):
        if self.blocks % 2:
            raise ShapeError("block count must be even (frame/global pairs)")
        if self.dim % self.heads:
            raise ShapeError("feature dim must be divisible by heads")
        if self.dim % 4:
            raise ShapeError("feature dim must be divisible by 4 for 2-D position codes")

    @property
    def schedule(self) -> List[str]:
        return ["frame" if i % 2 == 0 else "global" for i in range(self.blocks)]


@dataclass
class ExtractorParams:
    config: ExtractorConfig
    arrays: Dict[str, np.ndarray]
    seed: int = 0

    @classmethod
    def init(cls, config: ExtractorConfig = None, seed: int = 0) -> "ExtractorParams":
        config = config or ExtractorConfig()
        rng = np.random.default_rng([seed, 0x3D])
        arrays: Dict[str, np.ndarray] = {}
        s = config.stride
        init_linear(arrays, rng, "patch", s * s * 3, config.dim)
        # embed 2 * (pixel - 0.5) so tokens carry content rather than brightness
        w = arrays["patch.weight"]
        arrays["patch.bias"] = (arrays["patch.bias"] - w.sum(axis=0)).astype(np.float32)
        arrays["patch.weight"] = (2.0 * w).astype(np.float32)
        for i in range(config.blocks):
            init_attention(arrays, rng, f"blocks.{i}.attn", config.dim)
            init_ffn(arrays, rng, f"blocks.{i}.ffn", config.dim, config.ffn_hidden)
        return cls(config, arrays, seed)

    def to_checkpoint(self) -> dict:
        c = self.config
        return {
            "format": "extractor-v1",
            "config": {
                "dim": c.dim,
                "heads": c.heads,
                "blocks": c.blocks,
                "stride": c.stride,
                "ffn_hidden": c.ffn_hidden,
                "pos_scale": c.pos_scale,
            },
            "seed": self.seed,
            "weights": {k: v.tolist() for k, v in sorted(self.arrays.items())},
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "ExtractorParams":
        if ckpt.get("format") != "extractor-v1":
            raise DataError(f"not an extractor-v1 checkpoint: {ckpt.get('format')!r}")
        arrays = {k: np.asarray(v, np.float32) for k, v in ckpt["weights"].items()}
        return cls(ExtractorConfig(**ckpt["config"]), arrays, ckpt.get("seed", 0))


def position_code(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code (h*w, dim): first half encodes y, second half x."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coord in (ys.ravel(), xs.ravel()):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1).astype(np.float32)


def patchify(images: np.ndarray, stride: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/s * W/s, s*s*3), patch pixels row-major (dy, dx, c)."""
    H, W = images.shape[-3:-1]
    if H % stride or W % stride:
        raise ShapeError(f"image {H}x{W} not divisible by stride {stride}")
    h, w = H // stride, W // stride
    lead = images.shape[:-3]
    x = images.reshape(lead + (h, stride, w, stride, 3))
    x = np.moveaxis(x, -3, -4)  # (..., h, w, s, s, 3)
    return x.reshape(lead + (h * w, stride * stride * 3))


def patch_tokens(view, params: ExtractorParams) -> np.ndarray:
    """Token grid (h, w, d) for one view: linear patch embedding plus position code."""
    img = view.values if isinstance(view, ImageView) else np.asarray(view, np.float32)
    cfg = params.config
    tok = _tokens(img, params)
    return tok.reshape(img.shape[0] // cfg.stride, img.shape[1] // cfg.stride, cfg.dim)


def _tokens(images: np.ndarray, params: ExtractorParams) -> np.ndarray:
    cfg = params.config
    H, W = images.shape[-3:-1]
    patches = patchify(images, cfg.stride)
    tok, _ = linear(patches, lin(params.arrays, "patch"))
    pos = position_code(H // cfg.stride, W // cfg.stride, cfg.dim) * np.float32(cfg.pos_scale)
    return (tok + pos).astype(np.float32)


def run_blocks(tokens: np.ndarray, params: ExtractorParams, schedule: Sequence[str] = None):
    """Apply the block stack to tokens shaped (B, V, n, d), centre each view, LayerNorm.

    Returns ``(out, backward)`` with ``backward(dout) -> dtokens``; weights
    are frozen so no parameter gradients are produced.
    """
    cfg = params.config
    schedule = list(schedule or cfg.schedule)
    B, V, n, d = tokens.shape
    x = tokens
    backs = []
    for i, kind in enumerate(schedule):
        shape = (B * V, n, d) if kind == "frame" else (B, V * n, d)
        xr = x.reshape(shape)
        xr, b_att = attention_block(xr, None, params.arrays, f"blocks.{i}.attn", cfg.heads)
        xr, b_ffn = ffn_block(xr, params.arrays, f"blocks.{i}.ffn")
        backs.append((shape, b_att, b_ffn))
        x = xr.reshape(B, V, n, d)
    # remove the per-view mean feature so correlations compare local content
    xc = x - x.mean(axis=2, keepdims=True)
    out, b_ln = layer_norm(xc)

    def backward(dout):
        g = b_ln(dout)
        g = g - g.mean(axis=2, keepdims=True)
        for shape, b_att, b_ffn in reversed(backs):
            gr = g.reshape(shape)
            gr, _ = b_ffn(gr)
            gr, _, _ = b_att(gr)
            g = gr.reshape(B, V, n, d)
        return g

    return out, backward


def extract_batch(images: np.ndarray, params: ExtractorParams) -> np.ndarray:
    """Features for image sets shaped (B, V, H, W, 3) -> (B, V, h, w, d)."""
    cfg = params.config
    images = np.asarray(images, np.float32)
    if images.ndim != 5:
        raise ShapeError("expected (B, V, H, W, 3) images")
    B, V, H, W, _ = images.shape
    tok = _tokens(images, params)
    out, _ = run_blocks(tok, params)
    return out.reshape(B, V, H // cfg.stride, W // cfg.stride, cfg.dim)


def extract_dense_features(views: Sequence[ImageView], params: ExtractorParams) -> List[FeatureMap]:
    """Per-view feature maps for one jointly processed view set."""
    if not views:
        raise DataError("need at least one view")
    shapes = {v.values.shape for v in views}
    if len(shapes) != 1:
        raise ShapeError(f"views differ in size: {sorted(shapes)}")
    stack = np.stack([v.values for v in views])[None]
    feats = extract_batch(stack, params)[0]
    return [FeatureMap(f, params.config.stride, v.view_id) for f, v in zip(feats, views)]
