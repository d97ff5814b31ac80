"""Command-line entry point.

Subcommands: make-data, train, sample, sample-long, inspect-noise,
evaluate, ablate-threshold.  Every run writes a ``run_manifest.json`` into
its output directory with the resolved arguments, seeds, input/output
hashes, and versions; re-running a command with the manifest's argv
reproduces the outputs byte for byte.

Exit codes: 0 success, 1 user error, 2 internal error.  Environment
overrides: ``CTRLVID_OUTPUT_DIR`` (replaces the output directory) and
``CTRLVID_NUM_THREADS`` (torch thread count).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, ckpt, dataio
from .diffusion import GuidanceConfig
from .metrics import evaluate_videos, flicker, load_classifier
from .noiseinit import init_noise
from .pipeline import (SampleRequest, TrainConfig, derive_seed,
                       load_checkpoint, sample_first_frame, sample_long,
                       sample_video, train, train_phases)
from .scenes import generate_scene, random_scene, static_mask


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _write_manifest(out_dir: Path, command: str, argv: list[str],
                    config: dict, seeds: dict, inputs: dict[str, str],
                    started: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seeds": seeds,
        "input_hashes": inputs,
        "output_hashes": ckpt.tree_hash(out_dir),
        "wall_time_s": round(time.time() - started, 3),
        "versions": {"ctrlvid": __version__, "torch": torch.__version__,
                     "numpy": np.__version__},
    }
    ckpt.write_json(out_dir / "run_manifest.json", manifest)


def _out_dir(args) -> Path:
    override = os.environ.get("CTRLVID_OUTPUT_DIR")
    out = Path(override) if override else Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_controls(directory: Path, control_type: str) -> np.ndarray:
    prefix = {"edge": "edge", "softedge": "softedge", "depth": "depth"}[control_type]
    return dataio.load_frames(directory, prefix=prefix)


def cmd_make_data(argv: list[str]) -> int:
    parser = _Parser(prog="ctrlvid make-data")
    parser.add_argument("--out", required=True)
    parser.add_argument("--num-scenes", type=int, required=True)
    parser.add_argument("--frames", type=int, default=8)
    parser.add_argument("--size", type=int, nargs=2, default=(64, 64),
                        metavar=("H", "W"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    started = time.time()
    out = _out_dir(args)
    dataio.write_dataset(out, args.num_scenes, args.frames,
                         args.size[0], args.size[1], args.seed)
    _write_manifest(out, "make-data", ["make-data"] + argv,
                    vars(args), {"seed": args.seed}, {}, started)
    return 0


def cmd_train(argv: list[str]) -> int:
    parser = _Parser(prog="ctrlvid train")
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default="runs/train")
    args = parser.parse_args(argv)
    started = time.time()
    config_path = Path(args.config)
    if not config_path.exists():
        raise UsageError(f"config file not found: {config_path}")
    try:
        raw = json.loads(config_path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}") from e
    try:
        if "phases" in raw:
            shared = {k: v for k, v in raw.items() if k != "phases"}
            configs = [TrainConfig.from_dict({**shared, **phase})
                       for phase in raw["phases"]]
        else:
            configs = [TrainConfig.from_dict(raw)]
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid config: {e}") from e
    out = _out_dir(args)
    results = train_phases(configs, checkpoint_dir=out)
    final = results[-1]
    from .pipeline import save_checkpoint
    final_path = save_checkpoint(final.state, out / "final.ckpt")
    summary = {
        "steps": final.state.step,
        "final_loss_ema": final.ema_log[-1] if final.ema_log else None,
        "video_batches": sum(r.video_batches for r in results),
        "image_batches": sum(r.image_batches for r in results),
        "diverged": any(r.diverged for r in results),
        "checkpoint": str(final_path),
    }
    ckpt.write_json(out / "train_summary.json", summary)
    _write_manifest(out, "train", ["train"] + argv, raw,
                    {"seed": configs[0].seed},
                    {str(config_path): ckpt.file_hash(config_path)}, started)
    print(json.dumps(summary, indent=2))
    return 0 if not summary["diverged"] else 2


def _sample_args(prog: str) -> _Parser:
    parser = _Parser(prog=prog)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--prompt", required=True)
    parser.add_argument("--controls", required=True,
                        help="scene directory holding control-map PNGs")
    parser.add_argument("--out", required=True)
    parser.add_argument("--first-frame", default=None,
                        help="PNG to condition on (skips first-frame generation)")
    parser.add_argument("--thres", type=float, default=None)
    parser.add_argument("--wt", type=float, default=10.0)
    parser.add_argument("--wv", type=float, default=1.5)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--frames", type=int, default=8)
    return parser


def _run_sample(argv: list[str], iterations: int | None) -> int:
    prog = "ctrlvid sample-long" if iterations is None else "ctrlvid sample"
    parser = _sample_args(prog)
    if iterations is None:
        parser.add_argument("--iterations", type=int, required=True)
    args = parser.parse_args(argv)
    started = time.time()
    state, _ = load_checkpoint(args.checkpoint)
    controls = _load_controls(Path(args.controls), state.config.control_type)
    req = SampleRequest(
        caption=args.prompt,
        controls=controls,
        threshold=args.thres if args.thres is not None
        else state.config.noise_threshold,
        guidance=GuidanceConfig(text_scale=args.wt, video_scale=args.wv),
        seed=args.seed,
        iterations=args.iterations if iterations is None else 1,
        frames_per_iteration=args.frames,
        ddim_steps=args.steps,
    )
    out = _out_dir(args)
    inputs = {args.checkpoint: ckpt.file_hash(args.checkpoint)}
    if args.first_frame:
        first = dataio.png_to_array(Path(args.first_frame))
        inputs[args.first_frame] = ckpt.file_hash(args.first_frame)
        if req.iterations == 1:
            result = sample_video(state, req, first)
        else:
            raise UsageError("--first-frame currently applies to single-clip "
                             "sampling; drop it for sample-long")
    else:
        result = sample_long(state, req)
    dataio.save_frames(result.frames, out)
    cmd = "sample-long" if iterations is None else "sample"
    _write_manifest(out, cmd, [cmd] + argv,
                    {"request": {"caption": req.caption, "threshold": req.threshold,
                                 "text_scale": req.guidance.text_scale,
                                 "video_scale": req.guidance.video_scale,
                                 "iterations": req.iterations,
                                 "frames_per_iteration": req.frames_per_iteration,
                                 "ddim_steps": req.ddim_steps}},
                    {"seed": args.seed}, inputs, started)
    return 0


def cmd_inspect_noise(argv: list[str]) -> int:
    parser = _Parser(prog="ctrlvid inspect-noise")
    parser.add_argument("--video", required=True, help="scene directory")
    parser.add_argument("--thres", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True)
    parser.add_argument("--downsample", type=int, default=1)
    args = parser.parse_args(argv)
    started = time.time()
    frames = dataio.load_frames(Path(args.video))
    result = init_noise(frames, args.thres, args.seed,
                        downsample=args.downsample)
    out = _out_dir(args)
    for f in range(result.masks.masks.shape[0]):
        dataio.array_to_png(result.masks.masks[f], out / f"mask_{f:03d}.png")
    noise = result.noise
    stats = {
        "threshold": args.thres,
        "seed": args.seed,
        "frames": int(noise.shape[0]),
        "fresh_fraction": [float(m.mean()) for m in result.masks.masks],
        "mean": float(noise.mean()),
        "std": float(noise.std()),
        "identical_to_previous": [bool(np.array_equal(noise[i], noise[i - 1]))
                                  for i in range(1, noise.shape[0])],
    }
    ckpt.write_json(out / "noise_stats.json", stats)
    _write_manifest(out, "inspect-noise", ["inspect-noise"] + argv, vars(args),
                    {"seed": args.seed},
                    {args.video: json.dumps(sorted(
                        p.name for p in Path(args.video).glob("frame_*.png")))},
                    started)
    return 0


def cmd_evaluate(argv: list[str]) -> int:
    parser = _Parser(prog="ctrlvid evaluate")
    parser.add_argument("--generated", required=True)
    parser.add_argument("--reference", required=True)
    parser.add_argument("--out", required=True, help="report JSON path")
    parser.add_argument("--classifier", default=None)
    args = parser.parse_args(argv)
    started = time.time()
    gen_root, ref_root = Path(args.generated), Path(args.reference)
    gen_dirs = sorted(d for d in gen_root.glob("scene_*") if d.is_dir()) or [gen_root]
    ref_dirs = sorted(d for d in ref_root.glob("scene_*") if d.is_dir()) or [ref_root]
    if len(gen_dirs) != len(ref_dirs):
        raise UsageError(
            f"{len(gen_dirs)} generated scene dirs vs {len(ref_dirs)} references")
    generated = [dataio.load_frames(d) for d in gen_dirs]
    references = [dataio.load_scene(d) for d in ref_dirs]
    classifier = load_classifier(args.classifier) if args.classifier else None
    report = evaluate_videos(generated, references, classifier=classifier,
                             config={"generated": str(gen_root),
                                     "reference": str(ref_root)})
    report_path = Path(args.out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.write_json(report_path, report.to_dict())
    out_dir = report_path.parent
    _write_manifest(out_dir, "evaluate", ["evaluate"] + argv, vars(args), {},
                    {str(d): "" for d in (gen_dirs + ref_dirs)}, started)
    print(json.dumps({k: v for k, v in report.to_dict().items()
                      if k != "per_video"}, indent=2))
    return 0


def cmd_ablate_threshold(argv: list[str]) -> int:
    parser = _Parser(prog="ctrlvid ablate-threshold")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--thresholds", type=float, nargs="+",
                        default=[0.0, 0.1, 1.0])
    parser.add_argument("--num-seeds", type=int, default=10)
    parser.add_argument("--scene-seed", type=int, default=123)
    parser.add_argument("--frames", type=int, default=8)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--wt", type=float, default=10.0)
    parser.add_argument("--wv", type=float, default=1.5)
    args = parser.parse_args(argv)
    started = time.time()
    state, _ = load_checkpoint(args.checkpoint)
    scene = generate_scene(random_scene(args.scene_seed, frames=args.frames,
                                        height=state.config.height,
                                        width=state.config.width))
    mask = static_mask(scene.spec)
    controls = scene.control(state.config.control_type)
    out = _out_dir(args)
    report = {"thresholds": list(args.thresholds), "num_seeds": args.num_seeds,
              "scene_seed": args.scene_seed, "per_threshold": {}}
    grid_rows = []
    for thres in args.thresholds:
        flickers, identical = [], []
        frames_for_grid = None
        for s in range(args.num_seeds):
            req = SampleRequest(
                caption=scene.caption, controls=controls, threshold=thres,
                guidance=GuidanceConfig(text_scale=args.wt, video_scale=args.wv),
                seed=derive_seed(args.scene_seed, f"ablate{s}"),
                frames_per_iteration=args.frames, ddim_steps=args.steps,
                source_video=scene.frames,
            )
            result = sample_video(state, req, scene.frames[0])
            flickers.append(flicker(result.frames, mask))
            noise = result.initial_noise.noise
            identical.append(all(np.array_equal(noise[i], noise[i - 1])
                                 for i in range(1, len(noise))))
            if frames_for_grid is None:
                frames_for_grid = result.frames
        report["per_threshold"][f"{thres:g}"] = {
            "flicker_mean": float(np.mean(flickers)),
            "flicker_per_seed": [float(v) for v in flickers],
            "noise_identical_across_frames": all(identical),
        }
        grid_rows.append(np.concatenate(list(frames_for_grid), axis=2))
    grid = np.concatenate(grid_rows, axis=1)
    dataio.array_to_png(grid, out / "grid.png")
    ckpt.write_json(out / "ablation_report.json", report)
    _write_manifest(out, "ablate-threshold", ["ablate-threshold"] + argv,
                    vars(args), {"scene_seed": args.scene_seed},
                    {args.checkpoint: ckpt.file_hash(args.checkpoint)}, started)
    print(json.dumps({t: v["flicker_mean"]
                      for t, v in report["per_threshold"].items()}, indent=2))
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": lambda argv: _run_sample(argv, iterations=1),
    "sample-long": lambda argv: _run_sample(argv, iterations=None),
    "inspect-noise": cmd_inspect_noise,
    "evaluate": cmd_evaluate,
    "ablate-threshold": cmd_ablate_threshold,
}

USAGE = """usage: ctrlvid COMMAND [options]

commands:
  make-data         generate a synthetic scene dataset
  train             train a model from a JSON config
  sample            generate one clip from a checkpoint
  sample-long       generate an auto-regressive long video
  inspect-noise     dump residual noise masks and statistics
  evaluate          score generated clips against references
  ablate-threshold  compare noise thresholds on one scene

Run 'ctrlvid COMMAND --help' for command options.
"""


def dispatch(argv: list[str]) -> int:
    threads = os.environ.get("CTRLVID_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0 if argv else 1
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        sys.stderr.write(f"unknown command {command!r}\n{USAGE}")
        return 1
    try:
        return COMMANDS[command](rest)
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except UsageError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except (ValueError, FileNotFoundError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(f"internal error: {type(e).__name__}: {e}\n")
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
