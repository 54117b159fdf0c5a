"""Binary and JSON file formats.

RBIM  image:          "RBIM", u32 w, u32 h, then 8-bit RGB rows
RBCM  correspondence: "RBCM", u32 w, u32 h, then per pixel f32 x, f32 y, u8 valid
RBE1  embeddings:     "RBE1", u32 count, u32 dim, count*dim f32, then count NUL-terminated UTF-8 ids
RBF1  feature maps:   "RBF1", u32 views, u32 h, u32 w, u32 d3, then f32 values

All integers and reals are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError

_U32 = "<I"


def _header(f, magic: bytes, n: int) -> Tuple[int, ...]:
    got = f.read(4)
    if got != magic:
        raise DataError(f"bad magic {got!r}, expected {magic!r}")
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise DataError("truncated header")
    return struct.unpack("<" + "I" * n, raw)


def write_rbim(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) image; float input in [0, 1] is rounded to 8 bits."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"RBIM" + struct.pack("<II", w, h) + np.ascontiguousarray(img).tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_rbim(path) -> np.ndarray:
    """Return float32 (H, W, 3) in [0, 1]."""
    with open(path, "rb") as f:
        w, h = _header(f, b"RBIM", 2)
        data = f.read()
    if len(data) != w * h * 3:
        raise DataError(f"{path}: expected {w * h * 3} pixel bytes, got {len(data)}")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).astype(np.float32) / np.float32(255.0)


def write_rbcm(path, coords: np.ndarray, valid: np.ndarray) -> None:
    h, w, _ = coords.shape
    rec = np.zeros((h, w), dtype=[("x", "<f4"), ("y", "<f4"), ("v", "u1")])
    rec["x"] = coords[..., 0]
    rec["y"] = coords[..., 1]
    rec["v"] = valid.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"RBCM" + struct.pack("<II", w, h) + rec.tobytes())


def read_rbcm(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        w, h = _header(f, b"RBCM", 2)
        data = f.read()
    rec = np.frombuffer(data, dtype=[("x", "<f4"), ("y", "<f4"), ("v", "u1")])
    if rec.size != w * h:
        raise DataError(f"{path}: truncated correspondence map")
    rec = rec.reshape(h, w)
    return np.stack([rec["x"], rec["y"]], axis=-1).astype(np.float32), rec["v"].astype(bool)


def write_rbe1(path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, "<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise DataError("ids and vectors disagree")
    with open(path, "wb") as f:
        f.write(b"RBE1" + struct.pack("<II", *vectors.shape))
        f.write(np.ascontiguousarray(vectors).tobytes())
        for i in ids:
            f.write(i.encode("utf-8") + b"\0")


def read_rbe1(path) -> Tuple[List[str], np.ndarray]:
    with open(path, "rb") as f:
        count, dim = _header(f, b"RBE1", 2)
        raw = f.read(4 * count * dim)
        if len(raw) != 4 * count * dim:
            raise DataError(f"{path}: truncated embedding block")
        vecs = np.frombuffer(raw, "<f4").reshape(count, dim).astype(np.float32)
        tail = f.read()
    parts = tail.split(b"\0")
    if len(parts) < count + 1 or parts[count] != b"":
        raise DataError(f"{path}: expected {count} NUL-terminated ids")
    return [p.decode("utf-8") for p in parts[:count]], vecs


def write_rbf1(path, maps: np.ndarray) -> None:
    maps = np.asarray(maps, "<f4")
    v, h, w, d = maps.shape
    with open(path, "wb") as f:
        f.write(b"RBF1" + struct.pack("<IIII", v, h, w, d) + np.ascontiguousarray(maps).tobytes())


def read_rbf1(path) -> np.ndarray:
    with open(path, "rb") as f:
        v, h, w, d = _header(f, b"RBF1", 4)
        raw = f.read()
    if len(raw) != 4 * v * h * w * d:
        raise DataError(f"{path}: truncated feature block")
    return np.frombuffer(raw, "<f4").reshape(v, h, w, d).astype(np.float32)


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed separators, trailing newline)."""
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
