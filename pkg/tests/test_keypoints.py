import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from georank.keypoints import detect_keypoints, grid_points


def test_constant_image_falls_back_to_grid():
    kps = detect_keypoints(np.full((64, 64, 3), 0.4, np.float32), S=7)
    assert kps == grid_points(64, 64, 7)


def test_grid_padding_sequence():
    pts = grid_points(64, 64, 5)
    assert [(p.x, p.y) for p in pts[:3]] == [(64 / 6, 64 / 6), (64 / 2, 64 / 6), (5 * 64 / 6, 64 / 6)]
    assert len(grid_points(64, 64, 20)) == 20


def dot_image(x, y, sigma=3.0):
    """Gaussian dot; sigma sits inside the detector's searchable scale range."""
    ys, xs = np.mgrid[0:64, 0:64]
    g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma**2))
    return np.repeat(g[..., None], 3, axis=2).astype(np.float32)


@pytest.mark.parametrize("x,y", [(30, 22), (12, 45), (50, 9)])
def test_bright_dot_is_top_keypoint(x, y):
    img = dot_image(x, y)
    # brute-force oracle: strongest |DoG| over every pixel at a fine scale scan
    gray = img.mean(axis=2).astype(np.float64)
    best = (0.0, -1, -1)
    for s in np.linspace(2.0, 6.0, 17):
        d = np.abs(gaussian_filter(gray, s * 2**0.5) - gaussian_filter(gray, s))
        yy, xx = np.unravel_index(np.argmax(d), d.shape)
        best = max(best, (d[yy, xx], yy, xx))
    assert (best[1], best[2]) == (y, x)
    top = detect_keypoints(img, S=5)[0]
    assert abs(top.x - best[2]) <= 1 and abs(top.y - best[1]) <= 1


def test_dot_below_finest_scale_is_not_detected():
    # no image doubling, so blobs finer than the first searched scale fall through to the grid
    assert detect_keypoints(dot_image(30, 22, sigma=1.0), S=3) == grid_points(64, 64, 3)


def test_detector_is_deterministic_and_exact_count(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    a = detect_keypoints(img, S=20)
    b = detect_keypoints(img.copy(), S=20)
    assert a == b
    assert len(a) == 20
    assert len(set(a)) == 20
    assert all(0 <= k.x < 64 and 0 <= k.y < 64 for k in a)


def test_detector_rejects_zero_count():
    with pytest.raises(ValueError):
        detect_keypoints(np.zeros((8, 8, 3)), S=0)
