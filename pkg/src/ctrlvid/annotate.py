"""Exact control-map annotators for flat-colored shape frames.

Three annotators mirror the three control types the generator ships:
hard binary edges (gradient magnitude + non-maximum suppression +
hysteresis), soft edges (blurred gradient magnitude), and depth read off
the fixed hue-bucket lookup.  All operate on single frames shaped
[3, H, W] with values in [0, 1] and are deterministic.
"""

from __future__ import annotations

import numpy as np
import scipy.ndimage as ndi

from .scenes import HUE_CENTERS, HUE_TO_DEPTH, NUM_HUE_BUCKETS

# A unit step in one channel produces a Sobel response of 4; dividing by
# 4*sqrt(3) puts the magnitude of an axis-aligned full black-to-white step
# at exactly 1.0.
_SOBEL_STEP = 4.0 * np.sqrt(3.0)


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"expected frame shaped [3, H, W], got {frame.shape}")
    return frame.astype(np.float64, copy=False)


def _color_gradient(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel gradient magnitude plus the dominant channel's (gx, gy).

    Magnitude combines all channels (L2), so edges between equal-luminance
    colors are still seen.  The orientation used for non-maximum
    suppression comes from the channel with the strongest local gradient
    (ties break to the lowest channel index).
    """
    gx = np.stack([ndi.sobel(c, axis=1, mode="nearest") for c in frame])
    gy = np.stack([ndi.sobel(c, axis=0, mode="nearest") for c in frame])
    sq = gx * gx + gy * gy
    magnitude = np.sqrt(sq.sum(axis=0)) / _SOBEL_STEP
    dominant = np.argmax(sq, axis=0)
    take = lambda g: np.take_along_axis(g, dominant[None], axis=0)[0]
    return magnitude, take(gx), take(gy)


# Neighbor offsets (dy, dx) per quantized gradient orientation bin:
# 0 deg = horizontal gradient, then 45, 90, 135.
_NMS_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _orientation_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    return np.floor(((angle + 22.5) % 180.0) / 45.0).astype(np.int64) % 4


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """arr sampled at (y+dy, x+dx) with zeros beyond the canvas."""
    h, w = arr.shape
    out = np.zeros_like(arr)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    out[slice(max(-dy, 0), h + min(-dy, 0)),
        slice(max(-dx, 0), w + min(-dx, 0))] = arr[ys, xs]
    return out


def _color_less(frame: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Lexicographic RGB comparison, pixelwise."""
    r, g, b = frame
    ro, go, bo = other
    return (r < ro) | ((r == ro) & ((g < go) | ((g == go) & (b < bo))))


def _non_maximum_suppression(magnitude: np.ndarray, gx: np.ndarray,
                             gy: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Thin ridges of the gradient magnitude to one-pixel curves.

    A pixel survives when its magnitude is at least that of both neighbors
    along the gradient direction.  Hard color steps tie the two pixels
    flanking the step exactly; the tie goes to the lexicographically larger
    RGB value, which keeps the result one pixel wide (white beats black, so
    edges sit on the bright side of a step) and invariant under flips,
    since the rule depends on values, not orientation.
    """
    bins = _orientation_bins(gx, gy)
    keep = magnitude > 0
    for b, (dy, dx) in enumerate(_NMS_OFFSETS):
        in_bin = bins == b
        for sy, sx in ((dy, dx), (-dy, -dx)):
            m_n = _shifted(magnitude, sy, sx)
            neighbor = np.stack([_shifted(c, sy, sx) for c in frame])
            lose = (magnitude < m_n) | ((magnitude == m_n) & _color_less(frame, neighbor))
            keep &= ~(in_bin & lose)
    return keep


def edge_annotate(frame: np.ndarray, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Binary edge map [1, H, W] via thresholded, thinned gradients.

    Candidate pixels pass non-maximum suppression with magnitude above
    ``low``; a candidate is kept when its 8-connected candidate component
    contains at least one pixel at or above ``high``.
    """
    frame = _check_frame(frame)
    if high < low:
        raise ValueError(f"high threshold {high} below low threshold {low}")
    magnitude, gx, gy = _color_gradient(frame)
    ridge = _non_maximum_suppression(magnitude, gx, gy, frame)
    candidates = ridge & (magnitude >= low)
    strong = candidates & (magnitude >= high)
    if not strong.any():
        return np.zeros((1,) + frame.shape[1:], dtype=np.float32)
    labels, count = ndi.label(candidates, structure=np.ones((3, 3), bool))
    good = np.zeros(count + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    return good[labels].astype(np.float32)[None]


def soft_edge_annotate(frame: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Soft edge map [1, H, W]: blurred gradient magnitude scaled to max 1."""
    frame = _check_frame(frame)
    magnitude, _, _ = _color_gradient(frame)
    soft = ndi.gaussian_filter(magnitude, sigma=sigma, mode="nearest")
    peak = soft.max()
    if peak > 0:
        soft = soft / peak
    return soft.astype(np.float32)[None]


def hue_buckets(frame: np.ndarray) -> np.ndarray:
    """Nearest hue-bucket id [H, W] per pixel; ties go to the lowest id.

    Pixels without a defined hue (gray, where max channel equals min)
    land on hue 0 and hence bucket 0.
    """
    frame = _check_frame(frame)
    r, g, b = frame
    maxc = frame.max(axis=0)
    minc = frame.min(axis=0)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    hue = np.zeros_like(maxc)
    hue = np.where(maxc == r, ((g - b) / safe) % 6.0, hue)
    hue = np.where((maxc == g) & (g != r), (b - r) / safe + 2.0, hue)
    hue = np.where((maxc == b) & (b != r) & (b != g), (r - g) / safe + 4.0, hue)
    hue = np.where(delta == 0, 0.0, hue / 6.0)
    centers = np.array(HUE_CENTERS)
    diff = np.abs(hue[..., None] - centers[None, None, :])
    circular = np.minimum(diff, 1.0 - diff)
    return np.argmin(circular, axis=-1)


def depth_annotate(frame: np.ndarray) -> np.ndarray:
    """Depth map [1, H, W] from the fixed hue-bucket -> depth lookup.

    Works on any frame in [0, 1], including model output, which is what
    makes the depth-error metric computable without a depth estimator.
    """
    buckets = hue_buckets(frame)
    lookup = np.array(HUE_TO_DEPTH, dtype=np.float32)
    return lookup[buckets][None]


def annotate_video(frames: np.ndarray, kind: str) -> np.ndarray:
    """Apply one annotator over a [F, 3, H, W] clip; returns [F, 1, H, W]."""
    fns = {"edge": edge_annotate, "softedge": soft_edge_annotate,
           "depth": depth_annotate}
    if kind not in fns:
        raise ValueError(f"unknown annotator {kind!r}; expected one of {tuple(fns)}")
    return np.stack([fns[kind](f) for f in np.asarray(frames)])
