"""Residual-based noise initialization.

The sampler's starting noise is drawn fresh per frame, then every latent
cell whose source pixels did not change between consecutive frames is
overwritten with the (already propagated) value from the previous frame.
Static regions therefore carry identical noise through the whole clip,
moving regions get independent noise, and the motion threshold
interpolates between the two extremes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ResidualMasks:
    """Per-frame fresh-noise masks at latent resolution.

    ``masks[i]`` is 1 where frame ``i`` keeps its own freshly drawn noise
    and 0 where it copies frame ``i-1``.  Frame 0 is all ones by
    convention: it is always fresh.
    """

    masks: np.ndarray  # [F, 1, h, w] in {0, 1}
    threshold: float


@dataclass
class InitialNoise:
    noise: np.ndarray  # [F, C, h, w]
    seed: int
    threshold: float
    masks: ResidualMasks


def residual_magnitude(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """Per-pixel motion strength [1, H, W] between two frames in [0, 1].

    Channel-L2 difference scaled by 1/sqrt(3), so a full black-to-white
    change scores exactly 1.0 and a threshold of 1.0 can never be
    exceeded (strict comparison downstream).
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape or prev.ndim != 3 or prev.shape[0] != 3:
        raise ValueError(
            f"frames must share shape [3, H, W]; got {prev.shape} vs {cur.shape}"
        )
    diff = cur - prev
    return (np.sqrt((diff * diff).sum(axis=0)) / np.sqrt(3.0))[None]


def _block_max_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return mask
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by downsample factor {factor}")
    return mask.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def build_masks(video: np.ndarray, threshold: float, downsample: int = 1) -> ResidualMasks:
    """Threshold inter-frame residuals, then max-pool to the latent grid.

    Thresholding is strict (residual > threshold) at full resolution; a
    latent cell counts as moving when any pixel in its block moved.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4 or video.shape[1] != 3:
        raise ValueError(f"expected video shaped [F, 3, H, W], got {video.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    frames, _, height, width = video.shape
    h, w = height // downsample, width // downsample
    masks = np.zeros((frames, 1, h, w), dtype=np.float32)
    masks[0] = 1.0
    for i in range(1, frames):
        res = residual_magnitude(video[i - 1], video[i])[0]
        moving = res > threshold
        masks[i, 0] = _block_max_pool(moving, downsample)
    return ResidualMasks(masks=masks, threshold=threshold)


def init_noise(video: np.ndarray, threshold: float, seed: int,
               channels: int = 3, downsample: int = 1) -> InitialNoise:
    """Draw starting noise for a clip, propagated through static regions.

    Fresh standard-normal noise is drawn for every frame up front (so the
    first frame, and in fact every frame's fresh draw, depends only on the
    seed, never on the video).  The in-place frame loop then copies the
    previous frame's current value into every static cell, making the
    propagation cumulative across consecutive static frames.
    """
    masks = build_masks(video, threshold, downsample)
    frames = masks.masks.shape[0]
    h, w = masks.masks.shape[2:]
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((frames, channels, h, w))
    for i in range(1, frames):
        m = masks.masks[i] > 0.5  # [1, h, w], broadcasts over channels
        # Masked form of x_i <- (x_i - x_{i-1}) * mask + x_{i-1}: keeps both
        # branches bit-exact (fresh draws stay fresh, copies stay copies).
        noise[i] = np.where(m, noise[i], noise[i - 1])
    return InitialNoise(noise=noise, seed=seed, threshold=threshold, masks=masks)
