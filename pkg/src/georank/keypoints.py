"""Difference-of-Gaussians keypoint detector (location only, no descriptors)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

OCTAVES = 3
SCALES_PER_OCTAVE = 2
SIGMA0 = 1.6
CONTRAST = 0.01


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def dog_pyramid(gray: np.ndarray, octaves: int = OCTAVES, scales: int = SCALES_PER_OCTAVE, sigma0: float = SIGMA0):
    """List of (octave, DoG stack shaped (scales+2, h, w))."""
    k = 2.0 ** (1.0 / scales)
    base = gray
    out = []
    for o in range(octaves):
        if min(base.shape) < 4:
            break
        blurred = [gaussian_filter(base, sigma0 * k**i, mode="nearest") for i in range(scales + 3)]
        dogs = np.stack([b1 - b0 for b0, b1 in zip(blurred[:-1], blurred[1:])])
        out.append((o, dogs))
        base = blurred[scales][::2, ::2]
    return out


def dog_extrema(gray: np.ndarray, contrast: float = CONTRAST):
    """All strict 3x3x3 scale-space extrema as (response, y, x) in input pixel coordinates."""
    found = []
    fp = np.ones((3, 3, 3), bool)
    fp[1, 1, 1] = False
    for o, dogs in dog_pyramid(gray):
        nb_max = maximum_filter(dogs, footprint=fp, mode="nearest")
        nb_min = minimum_filter(dogs, footprint=fp, mode="nearest")
        inner = dogs[1:-1]
        is_ext = (inner > nb_max[1:-1]) | (inner < nb_min[1:-1])
        is_ext &= np.abs(inner) > contrast
        is_ext[:, [0, -1], :] = False
        is_ext[:, :, [0, -1]] = False
        _, ys, xs = np.nonzero(is_ext)
        resp = np.abs(inner[is_ext])
        scale = 2**o
        found += [(float(r), float(y * scale), float(x * scale)) for r, y, x in zip(resp, ys, xs)]
    return found


def grid_points(width: int, height: int, count: int) -> List[Keypoint]:
    """Fixed padding sequence: row-major centres of an n x n lattice."""
    n = max(1, math.ceil(math.sqrt(count)))
    pts = [Keypoint((i + 0.5) * width / n, (j + 0.5) * height / n) for j in range(n) for i in range(n)]
    return pts[:count]


def detect_keypoints(image, S: int = 20, contrast: float = CONTRAST) -> List[Keypoint]:
    """Exactly ``S`` keypoints: strongest DoG extrema first, grid points as padding."""
    if S < 1:
        raise ValueError("S must be >= 1")
    values = getattr(image, "values", image)
    gray = to_gray(values)
    h, w = gray.shape
    ext = dog_extrema(gray, contrast)
    ext.sort(key=lambda t: (-t[0], t[1], t[2]))
    seen = set()
    kps: List[Keypoint] = []
    for _, y, x in ext:
        if (y, x) in seen:
            continue
        seen.add((y, x))
        kps.append(Keypoint(min(x, w - 1.0), min(y, h - 1.0)))
        if len(kps) == S:
            return kps
    return kps + grid_points(w, h, S - len(kps))
