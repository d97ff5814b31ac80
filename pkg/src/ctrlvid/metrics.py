"""Quantitative evaluation of generated clips.

Depth error reads generated frames through the exact hue-bucket annotator,
so control adherence is measured analytically rather than through a
pretrained estimator.  Flicker quantifies temporal jitter in regions that
should hold still.  Edge F1 scores edge-map adherence with one-pixel
slack.  The text-alignment score is a deliberately scoped stand-in for
embedding-based alignment metrics: a small attribute classifier trained on
the synthetic corpus checks whether captioned attributes are visible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt
from .annotate import depth_annotate, edge_annotate
from .scenes import (COLOR_NAMES, DIRECTION_NAMES, KINDS, SHAPE_BUCKETS,
                     VideoSample, generate_scene, random_scene)


def depth_error(conditioning_depth: np.ndarray, generated: np.ndarray) -> float:
    """Mean |annotated depth - conditioning depth| over frames and pixels."""
    conditioning_depth = np.asarray(conditioning_depth)
    generated = np.asarray(generated)
    if (conditioning_depth.ndim != 4 or generated.ndim != 4
            or conditioning_depth.shape[0] != generated.shape[0]
            or conditioning_depth.shape[2:] != generated.shape[2:]):
        raise ValueError(
            f"misaligned shapes: depth {conditioning_depth.shape} vs "
            f"frames {generated.shape}")
    errs = [np.abs(depth_annotate(frame) - cond).mean()
            for frame, cond in zip(generated, conditioning_depth)]
    return float(np.mean(errs))


def flicker(video: np.ndarray, static_mask: np.ndarray) -> float:
    """Mean absolute frame-to-frame change inside the static region."""
    video = np.asarray(video)
    static_mask = np.asarray(static_mask).astype(bool)
    if video.ndim != 4:
        raise ValueError(f"expected video [F, 3, H, W], got {video.shape}")
    if static_mask.shape != video.shape[2:]:
        raise ValueError(
            f"static mask {static_mask.shape} does not match frames "
            f"{video.shape[2:]}")
    if not static_mask.any():
        raise ValueError("static mask is empty")
    diffs = np.abs(np.diff(video, axis=0))  # [F-1, 3, H, W]
    return float(diffs[:, :, static_mask].mean())


def edge_f1(conditioning_edges: np.ndarray, generated: np.ndarray) -> float:
    """F1 between conditioning edges and generated-frame edges, 1 px slack."""
    conditioning_edges = np.asarray(conditioning_edges)
    generated = np.asarray(generated)
    struct = np.ones((3, 3), bool)
    scores = []
    for cond, frame in zip(conditioning_edges, generated):
        ref = cond[0] > 0.5
        pred = edge_annotate(frame)[0] > 0.5
        if not ref.any() and not pred.any():
            scores.append(1.0)
            continue
        if not ref.any() or not pred.any():
            scores.append(0.0)
            continue
        ref_wide = ndi.binary_dilation(ref, struct)
        pred_wide = ndi.binary_dilation(pred, struct)
        precision = (pred & ref_wide).sum() / pred.sum()
        recall = (ref & pred_wide).sum() / ref.sum()
        scores.append(0.0 if precision + recall == 0
                      else 2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


# --- text-alignment proxy ---------------------------------------------------

DIRECTION_CLASSES = DIRECTION_NAMES + ("static",)
COLOR_CLASSES = tuple(COLOR_NAMES[b] for b in SHAPE_BUCKETS)


def _foreground_centroid(frame: np.ndarray) -> tuple[float, float, float]:
    """(cx, cy, area) of pixels far from the frame's dominant color.

    The dominant color is the per-channel median (the background on these
    scenes); coordinates are normalized to [-1, 1].  Empty foregrounds
    fall back to the center with zero area.
    """
    background = np.median(frame.reshape(3, -1), axis=1)
    dist = np.abs(frame - background[:, None, None]).max(axis=0)
    mask = dist > 0.2
    h, w = mask.shape
    if not mask.any():
        return 0.0, 0.0, 0.0
    ys, xs = np.nonzero(mask)
    cx = 2.0 * (xs.mean() + 0.5) / w - 1.0
    cy = 2.0 * (ys.mean() + 0.5) / h - 1.0
    return float(cx), float(cy), float(mask.mean())


class AttributeClassifier(nn.Module):
    """Small classifier over conv features plus centroid displacement.

    Three heads: shape color, shape kind, motion direction.  Conv features
    read the first/last frames and the mean temporal difference; an
    auxiliary vector carries the background-subtracted foreground centroid
    of the first and last frames, whose difference is what makes the
    direction head tractable at this corpus size.  Validation accuracy on
    held-out synthetic scenes is what licenses the alignment metric.
    """

    AUX_FEATURES = 7  # cx/cy/area at both ends, plus mean motion energy

    def __init__(self, size: int = 64):
        super().__init__()
        self.size = size
        self.net = nn.Sequential(
            nn.Conv2d(7, 24, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.mix = nn.Sequential(nn.Linear(64 + self.AUX_FEATURES, 96), nn.SiLU())
        self.color_head = nn.Linear(96, len(COLOR_CLASSES))
        self.kind_head = nn.Linear(96, len(KINDS))
        self.direction_head = nn.Linear(96, len(DIRECTION_CLASSES))

    @staticmethod
    def features(video: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        video = np.asarray(video, dtype=np.float32)
        first, last = video[0], video[-1]
        if video.shape[0] == 1:
            motion = np.zeros_like(video[0, 0])
        else:
            motion = np.abs(np.diff(video, axis=0)).mean(axis=(0, 1))
        maps = torch.from_numpy(np.concatenate([first, last, motion[None]]))
        cx0, cy0, a0 = _foreground_centroid(first)
        cx1, cy1, a1 = _foreground_centroid(last)
        aux = torch.tensor([cx0, cy0, a0, cx1, cy1, a1, float(motion.mean())])
        return maps, aux

    @classmethod
    def batch_features(cls, videos) -> tuple[torch.Tensor, torch.Tensor]:
        pairs = [cls.features(v) for v in videos]
        return (torch.stack([m for m, _ in pairs]),
                torch.stack([a for _, a in pairs]))

    def forward(self, maps: torch.Tensor, aux: torch.Tensor):
        h = self.mix(torch.cat([self.net(maps), aux], dim=-1))
        return self.color_head(h), self.kind_head(h), self.direction_head(h)

    def probabilities(self, video: np.ndarray) -> dict[str, dict[str, float]]:
        maps, aux = self.features(video)
        with torch.no_grad():
            color, kind, direction = self(maps.unsqueeze(0), aux.unsqueeze(0))
        return {
            "color": dict(zip(COLOR_CLASSES, color.softmax(-1)[0].tolist())),
            "kind": dict(zip(KINDS, kind.softmax(-1)[0].tolist())),
            "direction": dict(zip(DIRECTION_CLASSES,
                                  direction.softmax(-1)[0].tolist())),
        }


def _scene_labels(sample: VideoSample) -> tuple[int, int, int]:
    shape = sample.spec.shapes[0]
    color = SHAPE_BUCKETS.index(shape.hue)
    kind = KINDS.index(shape.kind)
    from .scenes import direction_name
    name = direction_name(shape.vx, shape.vy)
    direction = DIRECTION_CLASSES.index(name if name else "static")
    return color, kind, direction


def train_attribute_classifier(num_scenes: int = 360, epochs: int = 100,
                               seed: int = 0, size: int = 64,
                               frames: int = 8, lr: float = 2e-3
                               ) -> AttributeClassifier:
    """Fit the classifier on freshly generated single-shape scenes."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    scenes = [generate_scene(random_scene(7_000_000 + seed * 100_000 + i,
                                          frames=frames, height=size,
                                          width=size, min_shapes=1, max_shapes=1))
              for i in range(num_scenes)]
    maps, aux = AttributeClassifier.batch_features([s.frames for s in scenes])
    labels = torch.tensor([_scene_labels(s) for s in scenes])
    clf = AttributeClassifier(size=size)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(epochs):
        order = rng.permutation(num_scenes)
        for start in range(0, num_scenes, 32):
            idx = order[start: start + 32]
            color, kind, direction = clf(maps[idx], aux[idx])
            loss = (F.cross_entropy(color, labels[idx, 0])
                    + F.cross_entropy(kind, labels[idx, 1])
                    + F.cross_entropy(direction, labels[idx, 2]))
            opt.zero_grad()
            loss.backward()
            opt.step()
    return clf


def save_classifier(clf: AttributeClassifier, path: str | Path) -> str:
    path = Path(path)
    content = ckpt.save_tensors(
        path, {k: v.detach().numpy() for k, v in clf.state_dict().items()})
    ckpt.write_json(path.with_suffix(".json"),
                    {"size": clf.size, "content_hash": content})
    return content


def load_classifier(path: str | Path) -> AttributeClassifier:
    path = Path(path)
    manifest = ckpt.read_json(path.with_suffix(".json"))
    tensors = ckpt.load_tensors(path, expect_hash=manifest["content_hash"])
    clf = AttributeClassifier(size=manifest["size"])
    clf.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return clf


def parse_caption_attributes(caption: str) -> dict[str, list[str]]:
    """Extract the color/kind/direction words a caption mentions."""
    words = caption.lower().split()
    return {
        "color": [w for w in words if w in COLOR_CLASSES],
        "kind": [w for w in words if w in KINDS],
        "direction": ([w for w in words if w in DIRECTION_NAMES]
                      or (["static"] if any(w in COLOR_CLASSES for w in words)
                          and "moving" not in words else [])),
    }


def alignment_score(caption: str, generated: np.ndarray,
                    classifier: AttributeClassifier | None) -> float | None:
    """Fraction of captioned attributes the classifier detects in the clip.

    An attribute counts as detected when its class probability clears
    1 / (k + 1), with k the number of values mentioned in its category.
    Empty captions are vacuously aligned; without a classifier the score
    is absent (None), never zero.
    """
    mentioned = parse_caption_attributes(caption)
    total = sum(len(v) for v in mentioned.values())
    if total == 0:
        return 1.0
    if classifier is None:
        return None
    probs = classifier.probabilities(generated)
    hits = 0
    for category, values in mentioned.items():
        threshold = 1.0 / (len(values) + 1)
        for value in values:
            if probs[category].get(value, 0.0) >= threshold:
                hits += 1
    return hits / total


# --- report ------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    depth_error: float
    flicker: float | None
    edge_f1: float
    alignment: float | None
    per_video: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_videos(generated: list[np.ndarray], references: list[VideoSample],
                    classifier: AttributeClassifier | None = None,
                    config: dict | None = None) -> EvalReport:
    """Score generated clips against their reference scenes."""
    if len(generated) != len(references):
        raise ValueError(
            f"{len(generated)} generated clips vs {len(references)} references")
    per_video = []
    for gen, ref in zip(generated, references):
        from .scenes import static_mask
        mask = static_mask(ref.spec)
        row = {
            "caption": ref.caption,
            "depth_error": depth_error(ref.depth_maps, gen),
            "edge_f1": edge_f1(ref.edge_maps, gen),
            "flicker": flicker(gen, mask) if mask.any() else None,
            "alignment": alignment_score(ref.caption, gen, classifier),
        }
        per_video.append(row)

    def agg(key):
        vals = [r[key] for r in per_video if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(depth_error=agg("depth_error"), flicker=agg("flicker"),
                      edge_f1=agg("edge_f1"), alignment=agg("alignment"),
                      per_video=per_video, config=config or {})
