"""Procedural moving-shape scenes with analytically known depth and captions.

A scene is a handful of flat-colored shapes bouncing around a flat-colored
canvas.  Colors are drawn from 8 fixed, fully saturated hue buckets; each
bucket is tied to exactly one depth value, which is what makes depth
annotation of arbitrary frames (including model output) exact and
model-free.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

KINDS = ("square", "circle", "triangle")

# Hue bucket centers k/8 on the HSV circle, rendered at full saturation and
# value.  All RGB components land on multiples of 0.25, so rasterized frames
# survive float32 and 8-bit PNG round trips without leaving their bucket.
NUM_HUE_BUCKETS = 8
HUE_CENTERS = tuple(k / NUM_HUE_BUCKETS for k in range(NUM_HUE_BUCKETS))
COLOR_NAMES = ("red", "orange", "lime", "green", "cyan", "blue", "purple", "magenta")

# Fixed hue-bucket -> depth lookup.  Buckets 0..5 are shape buckets covering
# the three depth planes twice over; buckets 6 and 7 are reserved for
# backgrounds and read as maximal depth.
DEPTH_NEAR, DEPTH_MID, DEPTH_FAR, DEPTH_BACKGROUND = 0.25, 0.5, 0.75, 1.0
HUE_TO_DEPTH = (
    DEPTH_NEAR, DEPTH_MID, DEPTH_FAR,
    DEPTH_NEAR, DEPTH_MID, DEPTH_FAR,
    DEPTH_BACKGROUND, DEPTH_BACKGROUND,
)
SHAPE_BUCKETS = (0, 1, 2, 3, 4, 5)
BACKGROUND_BUCKETS = (6, 7)

DIRECTION_NAMES = (
    "right", "down-right", "down", "down-left",
    "left", "up-left", "up", "up-right",
)


def bucket_color(bucket: int) -> np.ndarray:
    """RGB color (float64, shape [3]) of a hue bucket at full saturation."""
    h6 = HUE_CENTERS[bucket] * 6.0
    i = int(h6)
    f = h6 - i
    p, q, t = 0.0, 1.0 - f, f
    rgb = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)][i % 6]
    return np.array(rgb, dtype=np.float64)


def direction_name(vx: float, vy: float) -> str | None:
    """8-way compass name for a velocity, or None when static.

    Screen convention: +x is right, +y is down.
    """
    if vx == 0 and vy == 0:
        return None
    angle = math.degrees(math.atan2(vy, vx)) % 360.0
    return DIRECTION_NAMES[int((angle + 22.5) // 45) % 8]


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    hue: int
    x: float
    y: float
    vx: float
    vy: float
    size: float
    depth: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if self.hue not in SHAPE_BUCKETS:
            raise ValueError(
                f"hue bucket {self.hue} is not a shape bucket; shapes use {SHAPE_BUCKETS}"
            )
        if self.size <= 0:
            raise ValueError(f"shape size must be positive, got {self.size}")
        expected = HUE_TO_DEPTH[self.hue]
        if self.depth is None:
            object.__setattr__(self, "depth", expected)
        elif self.depth != expected:
            raise ValueError(
                f"depth {self.depth} contradicts hue bucket {self.hue} "
                f"(lookup gives {expected})"
            )


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapeSpec, ...]
    background_hue: int
    frames: int
    height: int
    width: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.background_hue not in BACKGROUND_BUCKETS:
            raise ValueError(
                f"background hue bucket {self.background_hue} must be one of "
                f"{BACKGROUND_BUCKETS}"
            )
        if self.frames < 1:
            raise ValueError(f"frame count must be >= 1, got {self.frames}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"canvas {self.height}x{self.width} is empty")
        for s in self.shapes:
            half = s.size / 2.0
            if 2 * half > self.width or 2 * half > self.height:
                raise ValueError(
                    f"canvas {self.height}x{self.width} too small for a "
                    f"{s.kind} of size {s.size}"
                )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        raw = json.loads(text)
        shapes = tuple(ShapeSpec(**s) for s in raw.pop("shapes"))
        return cls(shapes=shapes, **raw)


@dataclass
class VideoSample:
    """One training/evaluation unit: frames plus exact per-frame annotations."""

    frames: np.ndarray          # [F, 3, H, W] in [0, 1]
    depth_maps: np.ndarray      # [F, 1, H, W] in [0, 1]
    edge_maps: np.ndarray       # [F, 1, H, W] binary
    soft_edge_maps: np.ndarray  # [F, 1, H, W] in [0, 1]
    caption: str
    spec: SceneSpec

    def control(self, kind: str) -> np.ndarray:
        maps = {"edge": self.edge_maps, "softedge": self.soft_edge_maps,
                "depth": self.depth_maps}
        if kind not in maps:
            raise ValueError(f"unknown control kind {kind!r}; expected one of {tuple(maps)}")
        return maps[kind]


def reflect_position(p: float, lo: float, hi: float) -> float:
    """Fold an unconstrained coordinate into [lo, hi] by reflection."""
    if hi < lo:
        raise ValueError(f"empty reflection interval [{lo}, {hi}]")
    span = hi - lo
    if span == 0:
        return lo
    y = (p - lo) % (2.0 * span)
    return lo + (y if y <= span else 2.0 * span - y)


def shape_position(shape: ShapeSpec, frame: int, height: int, width: int) -> tuple[float, float]:
    """Center of a shape at a given frame, with reflective bouncing."""
    half = shape.size / 2.0
    x = reflect_position(shape.x + shape.vx * frame, half, width - half)
    y = reflect_position(shape.y + shape.vy * frame, half, height - half)
    return x, y


def shape_mask(kind: str, cx: float, cy: float, size: float,
               height: int, width: int) -> np.ndarray:
    """Boolean coverage mask of a shape, sampled at pixel centers."""
    half = size / 2.0
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
    dx, dy = xs - cx, ys - cy
    if kind == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "circle":
        return dx * dx + dy * dy <= half * half
    if kind == "triangle":
        # Upward triangle inscribed in the radius-half circle.
        top = (cx, cy - half)
        left = (cx - half * math.sqrt(3) / 2, cy + half / 2)
        right = (cx + half * math.sqrt(3) / 2, cy + half / 2)
        inside = np.ones((height, width), dtype=bool)
        for (x0, y0), (x1, y1) in ((top, right), (right, left), (left, top)):
            # Keep pixels on the inner side of each directed edge.
            inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
        return inside
    raise ValueError(f"unknown shape kind {kind!r}")


def render_frame(spec: SceneSpec, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize one frame; returns (rgb [3,H,W], depth [1,H,W])."""
    h, w = spec.height, spec.width
    rgb = np.empty((3, h, w), dtype=np.float64)
    rgb[:] = bucket_color(spec.background_hue)[:, None, None]
    depth = np.full((1, h, w), DEPTH_BACKGROUND, dtype=np.float64)
    # Painter's algorithm: far planes first so near shapes occlude them.
    order = sorted(range(len(spec.shapes)),
                   key=lambda i: -spec.shapes[i].depth)  # type: ignore[operator]
    for i in order:
        s = spec.shapes[i]
        cx, cy = shape_position(s, frame, h, w)
        mask = shape_mask(s.kind, cx, cy, s.size, h, w)
        rgb[:, mask] = bucket_color(s.hue)[:, None]
        depth[0, mask] = s.depth
    return rgb, depth


def caption_for(spec: SceneSpec) -> str:
    parts = []
    for s in spec.shapes:
        phrase = f"a {COLOR_NAMES[s.hue]} {s.kind}"
        direction = direction_name(s.vx, s.vy)
        if direction is not None:
            phrase += f" moving {direction}"
        parts.append(phrase)
    return " and ".join(parts)


def generate_scene(spec: SceneSpec) -> VideoSample:
    """Render a scene into frames, exact annotations, and a caption.

    Pure function of the spec: repeated calls are bit-identical.
    """
    from .annotate import edge_annotate, soft_edge_annotate

    frames = np.empty((spec.frames, 3, spec.height, spec.width), dtype=np.float32)
    depths = np.empty((spec.frames, 1, spec.height, spec.width), dtype=np.float32)
    for f in range(spec.frames):
        rgb, depth = render_frame(spec, f)
        frames[f] = rgb.astype(np.float32)
        depths[f] = depth.astype(np.float32)
    edges = np.stack([edge_annotate(frames[f]) for f in range(spec.frames)])
    soft = np.stack([soft_edge_annotate(frames[f]) for f in range(spec.frames)])
    return VideoSample(frames=frames, depth_maps=depths, edge_maps=edges,
                       soft_edge_maps=soft, caption=caption_for(spec), spec=spec)


def static_mask(spec: SceneSpec) -> np.ndarray:
    """Pixels [H, W] never touched by motion across the whole clip."""
    h, w = spec.height, spec.width
    moving = np.zeros((h, w), dtype=bool)
    for s in spec.shapes:
        if s.vx == 0 and s.vy == 0:
            continue
        for f in range(spec.frames):
            cx, cy = shape_position(s, f, h, w)
            moving |= shape_mask(s.kind, cx, cy, s.size, h, w)
    return ~moving


def _bounce_free_start(rng, v: float, lo: float, hi: float, frames: int) -> float:
    """Start coordinate whose straight path stays inside [lo, hi]."""
    travel = v * (frames - 1)
    a = lo - min(0.0, travel)
    b = hi - max(0.0, travel)
    return float(rng.uniform(a, b))


def random_scene(seed: int, frames: int = 8, height: int = 64, width: int = 64,
                 min_shapes: int = 1, max_shapes: int = 2,
                 allow_static: bool = True) -> SceneSpec:
    """Draw a random but valid SceneSpec, deterministic in the seed.

    Start positions are chosen so no shape bounces within the clip: the
    captioned direction then matches the visible motion for the whole
    clip.  (Bouncing still governs positions beyond the sampled window.)
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = int(rng.integers(min_shapes, max_shapes + 1))
    size = min(height, width) / 4.0
    half = size / 2.0
    max_v = max(1, int((min(height, width) - 2 * half - 2) / (2 * (frames - 1)))
                ) if frames > 1 else 3
    max_v = min(3, max_v)
    shapes = []
    for _ in range(n):
        if allow_static and rng.random() < 0.15:
            vx, vy = 0.0, 0.0
        else:
            # Velocities sit exactly on the 8 compass directions, so the
            # captioned direction word describes the motion without
            # sector-boundary ambiguity.
            speed = float(rng.integers(1, max_v + 1))
            dx, dy = [(1, 0), (1, 1), (0, 1), (-1, 1),
                      (-1, 0), (-1, -1), (0, -1), (1, -1)][int(rng.integers(8))]
            vx, vy = speed * dx, speed * dy
        shapes.append(ShapeSpec(
            kind=KINDS[int(rng.integers(len(KINDS)))],
            hue=int(rng.choice(SHAPE_BUCKETS)),
            x=_bounce_free_start(rng, vx, half, width - half, frames),
            y=_bounce_free_start(rng, vy, half, height - half, frames),
            vx=vx, vy=vy, size=size,
        ))
    return SceneSpec(
        shapes=tuple(shapes),
        background_hue=int(rng.choice(BACKGROUND_BUCKETS)),
        frames=frames, height=height, width=width, seed=seed,
    )
