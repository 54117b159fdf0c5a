"""Seeded synthetic benchmark: procedural objects seen through homographies.

Each class gets a procedural texture (coloured blobs and strokes). The gallery
holds one canonical view per class; queries are warped, recoloured, occluded
and noised renders that come with exact ground-truth correspondences.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ConfigError, DataError
from .features import ImageView
from .formats import to_uint8, write_json, write_rbcm, write_rbim

SIZE = 64
BACKGROUND = 0.5
MIN_CLASS_DISTANCE = 12.0  # texture L2 floor, well under the dry-run minimum
MAX_REROLLS = 16
CLUTTER_CONTRAST = 0.08


@dataclass
class ProtoObject:
    class_id: str
    texture: np.ndarray  # (64, 64, 3) float32, multiples of 1/255
    distinctiveness: float
    reroll: int = 0


def _class_key(class_id: str) -> int:
    return zlib.crc32(class_id.encode("utf-8"))


def _blob_layer(rng: np.random.Generator, n: int, radius: Tuple[float, float], softness: float, palette):
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    layers = []
    for _ in range(n):
        cx, cy = rng.uniform(0, SIZE, 2)
        rx, ry = rng.uniform(*radius, 2)
        th = rng.uniform(0, np.pi)
        col = palette(rng)
        c, s = np.cos(th), np.sin(th)
        u = ((xs - cx) * c + (ys - cy) * s) / rx
        v = (-(xs - cx) * s + (ys - cy) * c) / ry
        r = np.sqrt(u * u + v * v)
        alpha = 1.0 / (1.0 + np.exp(np.clip((r - 1.0) / softness, -50, 50)))
        layers.append((alpha, col))
    return layers


def gen_object(seed: int, class_id: str, reroll: int = 0, variant: int = 0) -> ProtoObject:
    """Deterministic texture for ``(seed, class_id)``.

    Distinctiveness in [0, 1] sets the style: more, smaller and sharper blobs
    plus more strokes as it grows. ``variant=1`` gives the alternate packaging
    (same layout, a subset of blobs in different colours). ``reroll`` selects
    a fresh draw after a collision with another class.
    """
    rng = np.random.default_rng([seed, _class_key(class_id), reroll])
    distinct = float(rng.uniform(0.0, 1.0))
    n_blobs = 4 + int(round(distinct * 20))
    softness = 0.35 - 0.3 * distinct
    rmax = 22.0 - 14.0 * distinct
    palette = lambda r: r.uniform(0.0, 1.0, 3)
    bg = rng.uniform(0.15, 0.85, 3)
    layers = _blob_layer(rng, n_blobs, (rmax * 0.35, rmax), softness, palette)
    n_strokes = int(round(distinct * 8))
    strokes = []
    for _ in range(n_strokes):
        p0 = rng.uniform(0, SIZE, 2)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(8, 30)
        width = rng.uniform(0.8, 2.0)
        strokes.append((p0, ang, length, width, rng.uniform(0.0, 1.0, 3)))
    if variant:
        vr = np.random.default_rng([seed, _class_key(class_id), reroll, 0xBEEF, variant])
        flip = vr.random(len(layers)) < 0.5
        layers = [(a, vr.uniform(0, 1, 3) if f else c) for (a, c), f in zip(layers, flip)]

    tex = np.broadcast_to(bg, (SIZE, SIZE, 3)).copy()
    for alpha, col in layers:
        tex = tex * (1 - alpha[..., None]) + alpha[..., None] * col
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    for p0, ang, length, width, col in strokes:
        d = np.array([np.cos(ang), np.sin(ang)])
        rel_x, rel_y = xs - p0[0], ys - p0[1]
        t = np.clip(rel_x * d[0] + rel_y * d[1], 0, length)
        dist = np.hypot(rel_x - t * d[0], rel_y - t * d[1])
        alpha = np.clip(width + 0.5 - dist, 0, 1)
        tex = tex * (1 - alpha[..., None]) + alpha[..., None] * col
    tex = to_uint8(tex).astype(np.float32) / np.float32(255.0)
    return ProtoObject(class_id, tex, distinct, reroll)


def texture_distance(a: ProtoObject, b: ProtoObject) -> float:
    return float(np.linalg.norm(a.texture.astype(np.float64) - b.texture.astype(np.float64)))


# ---------------------------------------------------------------- rendering


@dataclass
class RenderSpec:
    H: np.ndarray = field(default_factory=lambda: np.eye(3))
    occlusion_fraction: float = 0.0
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["H"] = np.asarray(self.H, float).tolist()
        d["gain"] = list(map(float, self.gain))
        d["bias"] = list(map(float, self.bias))
        return d


@dataclass
class Correspondence:
    """Per output pixel: source texture coordinate (x, y) and validity."""

    coords: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool


def apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map (n, 2) points through a homography."""
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H, float).T
    return ph[:, :2] / ph[:, 2:3]


def _source_grid(H: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return apply_h(np.linalg.inv(H), pts).reshape(SIZE, SIZE, 2)


def check_homography(H: np.ndarray) -> None:
    H = np.asarray(H, float)
    if H.shape != (3, 3) or abs(np.linalg.det(H)) < 1e-9:
        raise DataError("degenerate homography")
    if np.linalg.cond(H) >= 100:
        raise DataError("homography condition number >= 100")
    src = _source_grid(H)
    inside = (src[..., 0] >= 0) & (src[..., 0] <= SIZE - 1) & (src[..., 1] >= 0) & (src[..., 1] <= SIZE - 1)
    if inside.mean() < 0.5:
        raise DataError("warped object covers less than half the frame")


def occluder_mask(fraction: float, seed: int) -> np.ndarray:
    """Seeded rectangle or ellipse covering ~``fraction`` of the frame."""
    if fraction * SIZE * SIZE < 1.0:
        # below one pixel of area there is nothing to draw
        return np.zeros((SIZE, SIZE), bool)
    if fraction > 0.6:
        raise DataError("occlusion fraction above 0.6")
    rng = np.random.default_rng([seed, 0x0CC])
    area = fraction * SIZE * SIZE
    aspect = rng.uniform(0.6, 1.6)
    ys, xs = np.mgrid[0:SIZE, 0:SIZE] + 0.5
    if rng.random() < 0.5:
        w = min(SIZE, np.sqrt(area * aspect))
        h = min(SIZE, area / w)
        x0 = rng.uniform(0, SIZE - w)
        y0 = rng.uniform(0, SIZE - h)
        return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
    a = np.sqrt(area * aspect / np.pi)
    b = area / (np.pi * a)
    a, b = min(a, SIZE / 2), min(b, SIZE / 2)
    cx = rng.uniform(a, SIZE - a)
    cy = rng.uniform(b, SIZE - b)
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def clutter_texture(seed: int) -> np.ndarray:
    """Flat seeded colour with faint oriented stripes (container wall, wrap film)."""
    rng = np.random.default_rng([seed, 0xC1A])
    base = rng.uniform(0.2, 0.8, 3)
    th = rng.uniform(0, np.pi)
    period = rng.uniform(5.0, 8.0)
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    wave = np.sin(2 * np.pi * (xs * np.cos(th) + ys * np.sin(th)) / period)
    return np.clip(base + CLUTTER_CONTRAST * wave[..., None], 0.0, 1.0)


def render_view(obj: ProtoObject, spec: RenderSpec, view_id: str = "") -> Tuple[ImageView, Correspondence]:
    """Warp, recolour, occlude and noise the texture; image is 8-bit quantized."""
    H = np.asarray(spec.H, float)
    check_homography(H)
    src = _source_grid(H)
    sx, sy = src[..., 0], src[..., 1]
    inside = (sx >= 0) & (sx <= SIZE - 1) & (sy >= 0) & (sy <= SIZE - 1)
    img = np.empty((SIZE, SIZE, 3))
    for c in range(3):
        img[..., c] = map_coordinates(obj.texture[..., c].astype(np.float64), [sy, sx], order=1, mode="nearest")
    img[~inside] = BACKGROUND
    gain = np.asarray(spec.gain, float)
    bias = np.asarray(spec.bias, float)
    if np.any(gain != 1.0) or np.any(bias != 0.0):
        img = img * gain + bias
    occ = occluder_mask(spec.occlusion_fraction, spec.seed)
    if occ.any():
        img[occ] = clutter_texture(spec.seed)[occ]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 0x40153])
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = to_uint8(np.clip(img, 0, 1)).astype(np.float32) / np.float32(255.0)
    valid = inside & ~occ
    return ImageView(img, view_id), Correspondence(src.astype(np.float32), valid)


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], float)


def sample_homography(rng: np.random.Generator, severity: float) -> np.ndarray:
    """Rotation, anisotropic scale, shear, perspective and translation about the centre.

    ``severity`` in [0, 1] scales every range; 0 gives the identity.
    """
    for _ in range(100):
        th = np.deg2rad(rng.uniform(-30, 30)) * severity
        sx, sy = np.exp(rng.uniform(np.log(0.7), np.log(1.4), 2) * severity)
        sh = rng.uniform(-0.2, 0.2) * severity
        t = rng.uniform(-8, 8, 2) * severity
        pers = rng.uniform(-0.002, 0.002, 2) * severity
        c = (SIZE - 1) / 2.0
        R = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
        A = np.array([[sx, sh, 0], [0, sy, 0], [0, 0, 1]])
        P = np.array([[1, 0, 0], [0, 1, 0], [pers[0], pers[1], 1]])
        H = translation(c + t[0], c + t[1]) @ P @ R @ A @ translation(-c, -c)
        H = H / np.cbrt(np.linalg.det(H))  # unit determinant scale convention
        try:
            check_homography(H)
            return H
        except DataError:
            continue
    raise DataError("could not sample a valid homography")


# ------------------------------------------------------------------ dataset


@dataclass
class BenchConfig:
    classes: int = 200
    queries: int = 400
    views_per_query: int = 1
    difficulty: float = 0.5
    occlusion_max: float = 0.35
    recolor: float = 0.25
    noise: float = 0.03
    variant_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.views_per_query not in (1, 3):
            raise ConfigError("views_per_query must be 1 or 3")
        if self.queries < 1:
            raise ConfigError("need at least one query")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigError("difficulty must lie in [0, 1]")
        if not 0.0 <= self.occlusion_max <= 0.6:
            raise ConfigError("occlusion_max must lie in [0, 0.6]")

    @classmethod
    def preset(cls, name: str, **overrides) -> "BenchConfig":
        presets = {
            "easy": dict(difficulty=0.0, occlusion_max=0.0, recolor=0.0, noise=0.0, variant_prob=0.0),
            "medium": dict(difficulty=0.5),
            "hard": dict(difficulty=1.0, occlusion_max=0.5, recolor=0.4, noise=0.05, variant_prob=0.3),
        }
        if name not in presets:
            raise ConfigError(f"unknown difficulty preset {name!r}")
        return cls(**{**presets[name], **overrides})


def class_name(i: int) -> str:
    return f"c{i:04d}"


def query_spec(cfg: BenchConfig, qi: int, view: int) -> Tuple[RenderSpec, int]:
    """Render spec and packaging variant for one query view, from a per-view seed."""
    rng = np.random.default_rng([cfg.seed, 1, qi, view])
    d = cfg.difficulty
    if d == 0.0:
        return RenderSpec(seed=int(rng.integers(2**31))), 0
    severity = d * rng.uniform(0.3, 1.0)
    H = sample_homography(rng, severity)
    occ = float(rng.uniform(0.0, cfg.occlusion_max)) if rng.random() < 0.6 else 0.0
    gain = tuple(float(g) for g in 1.0 + rng.uniform(-cfg.recolor, cfg.recolor, 3))
    bias = tuple(float(b) for b in rng.uniform(-cfg.recolor, cfg.recolor, 3) * 0.4)
    variant = int(rng.random() < cfg.variant_prob)
    spec = RenderSpec(H, occ, gain, bias, cfg.noise * severity / max(d, 1e-9), int(rng.integers(2**31)))
    return spec, variant


def build_objects(cfg: BenchConfig) -> List[ProtoObject]:
    """Class textures, re-rolled when too close to an earlier class."""
    objs: List[ProtoObject] = []
    flat = []
    for i in range(cfg.classes):
        cid = class_name(i)
        for r in range(MAX_REROLLS):
            o = gen_object(cfg.seed, cid, reroll=r)
            v = o.texture.astype(np.float64).ravel()
            if not flat or np.min(np.linalg.norm(np.stack(flat) - v, axis=1)) > MIN_CLASS_DISTANCE:
                break
        objs.append(o)
        flat.append(o.texture.astype(np.float64).ravel())
    return objs


def build_dataset(cfg: BenchConfig, out_dir) -> List[dict]:
    """Write images, correspondence maps and ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "corr").mkdir(parents=True, exist_ok=True)
    objs = build_objects(cfg)
    manifest: List[dict] = []
    for o in objs:
        gid = "g" + o.class_id[1:]
        path = f"images/{gid}.rbim"
        write_rbim(out / path, o.texture)
        manifest.append({"id": gid, "class_id": o.class_id, "view_paths": [path], "split": "gallery"})
    C = cfg.classes
    for qi in range(cfg.queries):
        obj = objs[qi % C]
        rnd = qi // C
        split = "train" if rnd % 2 == 0 else "test"
        qid = f"q{qi:05d}"
        rec = {"id": qid, "class_id": obj.class_id, "split": split, "view_paths": [], "corr_paths": [], "homographies": [], "render": []}
        for v in range(cfg.views_per_query):
            spec, variant = query_spec(cfg, qi, v)
            src = gen_object(cfg.seed, obj.class_id, reroll=obj.reroll, variant=variant) if variant else obj
            view, corr = render_view(src, spec, f"{qid}/{v}")
            ip, cp = f"images/{qid}_{v}.rbim", f"corr/{qid}_{v}.rbcm"
            write_rbim(out / ip, view.values)
            write_rbcm(out / cp, corr.coords, corr.valid)
            rec["view_paths"].append(ip)
            rec["corr_paths"].append(cp)
            rec["homographies"].append(np.asarray(spec.H, float).tolist())
            rec["render"].append({**spec.to_dict(), "variant": variant})
        manifest.append(rec)
    write_json(out / "manifest.json", manifest)
    write_json(out / "bench_config.json", asdict(cfg))
    return manifest

