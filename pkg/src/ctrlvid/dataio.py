"""On-disk scene layout: PNG frames and maps plus caption and spec files.

Layout per scene::

    DIR/scene_00000/
        frame_000.png ... frame_00F.png      RGB, 8-bit
        depth_000.png ...                    grayscale, value * 255
        edge_000.png / softedge_000.png      grayscale
        caption.txt
        spec.json
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .scenes import SceneSpec, VideoSample, generate_scene


def array_to_png(arr: np.ndarray, path: Path) -> None:
    """Write [C, H, W] float in [0, 1] as an 8-bit PNG (scaled by 255)."""
    data = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[0] == 1:
        img = Image.fromarray(data[0], mode="L")
    else:
        img = Image.fromarray(data.transpose(1, 2, 0), mode="RGB")
    img.save(path)


def png_to_array(path: Path) -> np.ndarray:
    """Read a PNG back to [C, H, W] float32 in [0, 1]."""
    img = Image.open(path)
    data = np.asarray(img, dtype=np.float32) / 255.0
    if data.ndim == 2:
        return data[None]
    return data.transpose(2, 0, 1)


def save_scene(sample: VideoSample, scene_dir: str | Path) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    for f in range(sample.frames.shape[0]):
        array_to_png(sample.frames[f], scene_dir / f"frame_{f:03d}.png")
        array_to_png(sample.depth_maps[f], scene_dir / f"depth_{f:03d}.png")
        array_to_png(sample.edge_maps[f], scene_dir / f"edge_{f:03d}.png")
        array_to_png(sample.soft_edge_maps[f], scene_dir / f"softedge_{f:03d}.png")
    (scene_dir / "caption.txt").write_text(sample.caption + "\n")
    (scene_dir / "spec.json").write_text(sample.spec.to_json() + "\n")


def load_scene(scene_dir: str | Path) -> VideoSample:
    """Read a scene directory back into arrays (8-bit quantized values)."""
    scene_dir = Path(scene_dir)
    spec = SceneSpec.from_json((scene_dir / "spec.json").read_text())
    caption = (scene_dir / "caption.txt").read_text().strip()

    def stack(prefix: str) -> np.ndarray:
        paths = sorted(scene_dir.glob(f"{prefix}_*.png"))
        if not paths:
            raise FileNotFoundError(f"no {prefix}_*.png files in {scene_dir}")
        return np.stack([png_to_array(p) for p in paths])

    return VideoSample(frames=stack("frame"), depth_maps=stack("depth"),
                       edge_maps=stack("edge"), soft_edge_maps=stack("softedge"),
                       caption=caption, spec=spec)


def load_frames(directory: str | Path, prefix: str = "frame") -> np.ndarray:
    directory = Path(directory)
    paths = sorted(directory.glob(f"{prefix}_*.png"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.png files in {directory}")
    return np.stack([png_to_array(p) for p in paths])


def save_frames(frames: np.ndarray, directory: str | Path,
                prefix: str = "frame") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in range(len(frames)):
        array_to_png(frames[f], directory / f"{prefix}_{f:03d}.png")


def write_dataset(out_dir: str | Path, num_scenes: int, frames: int,
                  height: int, width: int, seed: int) -> list[Path]:
    """Generate and save ``num_scenes`` scenes; returns their directories."""
    from .scenes import random_scene

    out_dir = Path(out_dir)
    dirs = []
    for i in range(num_scenes):
        sample = generate_scene(random_scene(seed + i, frames=frames,
                                             height=height, width=width))
        scene_dir = out_dir / f"scene_{i:05d}"
        save_scene(sample, scene_dir)
        dirs.append(scene_dir)
    return dirs
