"""Training loop, checkpointing, and the three sampling entry points.

Training mixes clip batches and single-frame batches at a configurable
ratio and optimizes a selectable parameter set, so an image-pretraining
phase and a temporal phase are just two configs chained on the same
checkpoint.  Sampling generates a first frame from its control map alone,
then rolls the clip out conditioned on that frame, and chains clips
auto-regressively for long videos.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import ckpt
from .codec import LatentSequence, PixelCodec, load_codec
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (Batch, DiffusionSchedule, GuidanceConfig, ddim_step,
                        guidance_dual, guidance_text, loss_image, loss_video)
from .noiseinit import InitialNoise, init_noise
from .scenes import VideoSample, generate_scene, random_scene
from .textcond import TextEncoder, Vocabulary

TRAINABLE_SETS = ("all", "spatial", "temporal")


@dataclass
class TrainConfig:
    """One training phase; defaults follow the reference recipe.

    The stock recipe is batch 16, learning rate 1e-5, 10k steps, and an
    8:2 clip-to-image ratio; the toy runs shrink the batch and step count
    and raise the learning rate (1e-4) to fit a small machine.
    """

    steps: int = 10_000
    batch_size: int = 16
    lr: float = 1e-5
    video_image_ratio: tuple[int, int] = (8, 2)
    trainable: str = "all"
    seed: int = 0
    codec_mode: str = "pixel"
    codec_path: str | None = None
    control_type: str = "depth"
    null_prob: float = 0.1
    residual_noise: bool = True
    noise_threshold: float = 0.1
    frames: int = 8
    height: int = 64
    width: int = 64
    num_video_scenes: int = 256
    num_image_scenes: int = 64
    arch: DenoiserConfig = field(default_factory=DenoiserConfig.tiny)
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    log_every: int = 25
    checkpoint_every: int = 500

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = DenoiserConfig.from_dict(self.arch)
        if isinstance(self.schedule, dict):
            self.schedule = DiffusionSchedule(**self.schedule)
        self.video_image_ratio = tuple(self.video_image_ratio)
        if len(self.video_image_ratio) != 2 or min(self.video_image_ratio) < 0 \
                or sum(self.video_image_ratio) <= 0:
            raise ValueError(f"bad video:image ratio {self.video_image_ratio}")
        if self.trainable not in TRAINABLE_SETS:
            raise ValueError(
                f"trainable set {self.trainable!r} not one of {TRAINABLE_SETS}")
        if self.control_type not in ("edge", "softedge", "depth"):
            raise ValueError(f"unknown control type {self.control_type!r}")
        if self.codec_mode not in ("pixel", "learned"):
            raise ValueError(f"codec mode must be 'pixel' or 'learned', got {self.codec_mode!r}")

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["arch"] = self.arch.to_dict()
        raw["schedule"] = {"timesteps": self.schedule.timesteps,
                           "beta_start": self.schedule.beta_start,
                           "beta_end": self.schedule.beta_end,
                           "ddim_steps": self.schedule.ddim_steps}
        raw["video_image_ratio"] = list(self.video_image_ratio)
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**raw)


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def build_corpus(num: int, frames: int, height: int, width: int,
                 seed_base: int) -> list[VideoSample]:
    """Render a deterministic corpus of scenes (seeds seed_base + i)."""
    return [generate_scene(random_scene(seed_base + i, frames=frames,
                                        height=height, width=width))
            for i in range(num)]


@dataclass
class PipelineState:
    """Everything needed to run or continue the model."""

    config: TrainConfig
    model: Denoiser
    text: TextEncoder
    vocab: Vocabulary
    codec: object
    schedule: DiffusionSchedule
    step: int = 0

    def parameters_for(self, selector: str) -> list[torch.nn.Parameter]:
        groups = self.model.parameter_groups()
        names = {"all": set(groups["temporal"]) | set(groups["spatial"]),
                 "spatial": set(groups["spatial"]),
                 "temporal": set(groups["temporal"])}[selector]
        by_name = dict(self.model.named_parameters())
        params = [by_name[n] for n in sorted(names)]
        if selector in ("all", "spatial"):
            params += list(self.text.parameters())
        return params


def init_state(config: TrainConfig) -> PipelineState:
    torch.manual_seed(config.seed)
    vocab = Vocabulary()
    arch = replace(config.arch)
    if config.codec_mode == "pixel":
        codec = PixelCodec()
    else:
        if not config.codec_path:
            raise ValueError("learned codec mode requires codec_path")
        codec = load_codec(config.codec_path)
    arch.in_channels = codec.latent_channels
    arch.control_downsample = codec.downsample
    model = Denoiser(arch)
    text = TextEncoder(vocab, width=arch.context_width)
    config.arch = arch
    return PipelineState(config=config, model=model, text=text, vocab=vocab,
                         codec=codec, schedule=config.schedule)


@dataclass
class TrainResult:
    state: PipelineState
    losses: list[float]
    ema_log: list[float]
    video_batches: int = 0
    image_batches: int = 0
    diverged: bool = False
    checkpoint: str | None = None


def _batch_contexts(state: PipelineState, captions: list[str],
                    drop: np.ndarray) -> torch.Tensor:
    rows = []
    for caption, d in zip(captions, drop):
        tokens = state.vocab.null_tokens() if d else state.vocab.tokenize(caption)
        rows.append(state.text.embed(tokens).values)
    return torch.stack(rows)


def _make_batch(state: PipelineState, samples: list[VideoSample],
                rng: np.random.Generator) -> Batch:
    cfg = state.config
    frames = torch.from_numpy(np.stack([s.frames for s in samples]))
    controls = torch.from_numpy(np.stack([s.control(cfg.control_type)
                                          for s in samples]))
    drop = rng.random(len(samples)) < cfg.null_prob
    contexts = _batch_contexts(state, [s.caption for s in samples], drop)
    return Batch(frames=frames, controls=controls, contexts=contexts)


def train(config: TrainConfig, state: PipelineState | None = None,
          checkpoint_dir: str | Path | None = None,
          video_corpus: list[VideoSample] | None = None,
          image_corpus: list[VideoSample] | None = None,
          rng_state: dict | None = None,
          optimizer: torch.optim.Optimizer | None = None) -> TrainResult:
    """Run one training phase; pass a state to continue a previous phase.

    Each step draws a clip batch with probability ratio_v / (ratio_v +
    ratio_i), otherwise a single-frame batch.  A non-finite loss halts the
    run and leaves the last checkpoint in place.  Deterministic given
    (config, state, rng_state).
    """
    if state is None:
        state = init_state(config)
    if video_corpus is None:
        video_corpus = build_corpus(config.num_video_scenes, config.frames,
                                    config.height, config.width,
                                    seed_base=1_000_000 * (config.seed + 1))
    if image_corpus is None:
        image_corpus = build_corpus(config.num_image_scenes, 1, config.height,
                                    config.width,
                                    seed_base=1_000_000 * (config.seed + 1) + 500_000)
    rng = np.random.default_rng(config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state

    opt = optimizer if optimizer is not None else torch.optim.Adam(
        state.parameters_for(config.trainable), lr=config.lr)
    v, i = config.video_image_ratio
    p_video = v / (v + i)
    result = TrainResult(state=state, losses=[], ema_log=[])
    ema = None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    target = state.step + config.steps

    while state.step < target:
        take_video = rng.random() < p_video
        corpus = video_corpus if take_video else image_corpus
        idx = rng.integers(0, len(corpus), size=config.batch_size)
        batch = _make_batch(state, [corpus[j] for j in idx], rng)
        if take_video:
            loss = loss_video(batch, state.model, state.codec, state.schedule,
                              rng, residual_noise=config.residual_noise,
                              threshold=config.noise_threshold)
            result.video_batches += 1
        else:
            loss = loss_image(batch, state.model, state.codec, state.schedule, rng)
            result.image_batches += 1
        if not torch.isfinite(loss):
            result.diverged = True
            if ckpt_dir is not None:
                result.checkpoint = str(save_checkpoint(
                    state, ckpt_dir / "halt.ckpt", rng=rng, opt=opt))
            return result
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.step += 1
        value = float(loss.detach())
        result.losses.append(value)
        ema = value if ema is None else 0.98 * ema + 0.02 * value
        if state.step % config.log_every == 0:
            result.ema_log.append(ema)
        if ckpt_dir is not None and (state.step % config.checkpoint_every == 0
                                     or state.step == target):
            result.checkpoint = str(save_checkpoint(
                state, ckpt_dir / f"step{state.step:06d}.ckpt", rng=rng, opt=opt))
    return result


def train_phases(configs: list[TrainConfig],
                 checkpoint_dir: str | Path | None = None) -> list[TrainResult]:
    """Chain training phases on one shared state (e.g. image then temporal)."""
    state = None
    results = []
    for config in configs:
        results.append(train(config, state=state, checkpoint_dir=checkpoint_dir))
        state = results[-1].state
        if results[-1].diverged:
            break
    return results


# --- checkpoint serialization -------------------------------------------


def save_checkpoint(state: PipelineState, path: str | Path,
                    rng: np.random.Generator | None = None,
                    opt: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.model.state_dict().items():
        tensors[f"model/{name}"] = p.detach().numpy()
    for name, p in state.text.state_dict().items():
        tensors[f"text/{name}"] = p.detach().numpy()
    optim_meta = None
    if opt is not None:
        sd = opt.state_dict()
        optim_meta = {"param_groups": sd["param_groups"],
                      "state_keys": {}}
        for pid, entry in sd["state"].items():
            keys = []
            for key, val in entry.items():
                if torch.is_tensor(val):
                    tensors[f"optim/{pid}/{key}"] = val.detach().numpy()
                    keys.append([key, "tensor"])
                else:
                    keys.append([key, val])
            optim_meta["state_keys"][str(pid)] = keys
    tensors["rng/torch"] = torch.get_rng_state().numpy()
    content = ckpt.save_tensors(path, tensors)
    manifest = {
        "content_hash": content,
        "step": state.step,
        "arch": state.config.arch.to_dict(),
        "train_config": state.config.to_dict(),
        "vocab": state.vocab.to_json(),
        "vocab_hash": state.vocab.content_hash(),
        "codec": {"mode": state.config.codec_mode,
                  "codec_id": state.codec.codec_id,
                  "path": state.config.codec_path},
        "schedule": state.config.to_dict()["schedule"],
        "np_rng_state": None if rng is None else rng.bit_generator.state,
        "optim": optim_meta,
    }
    ckpt.write_json(path.with_suffix(path.suffix + ".json"), manifest)
    return path


def load_checkpoint(path: str | Path, expect_vocab_hash: str | None = None,
                    expect_codec_id: str | None = None
                    ) -> tuple[PipelineState, dict]:
    """Restore a pipeline state; refuses hash mismatches.

    Returns the state plus the raw manifest (which carries the numpy RNG
    state and optimizer tensors needed for exact training resumption).
    """
    path = Path(path)
    manifest = ckpt.read_json(path.with_suffix(path.suffix + ".json"))
    if expect_vocab_hash is not None and manifest["vocab_hash"] != expect_vocab_hash:
        raise ValueError(
            f"vocabulary hash mismatch: checkpoint has {manifest['vocab_hash'][:12]}..., "
            f"expected {expect_vocab_hash[:12]}...")
    tensors = ckpt.load_tensors(path, expect_hash=manifest["content_hash"])
    config = TrainConfig.from_dict(manifest["train_config"])
    state = init_state(config)
    if expect_codec_id is not None and state.codec.codec_id != expect_codec_id:
        raise ValueError(
            f"codec mismatch: state has {state.codec.codec_id!r}, "
            f"expected {expect_codec_id!r}")
    model_sd = {k[len("model/"):]: torch.from_numpy(v)
                for k, v in tensors.items() if k.startswith("model/")}
    text_sd = {k[len("text/"):]: torch.from_numpy(v)
               for k, v in tensors.items() if k.startswith("text/")}
    state.model.load_state_dict(model_sd)
    state.text.load_state_dict(text_sd)
    state.step = int(manifest["step"])
    torch.set_rng_state(torch.from_numpy(tensors["rng/torch"]))
    return state, manifest


def resume_optimizer(state: PipelineState, manifest: dict,
                     tensors_path: str | Path, config: TrainConfig
                     ) -> torch.optim.Optimizer:
    """Rebuild the Adam state saved alongside a checkpoint."""
    tensors = ckpt.load_tensors(tensors_path)
    opt = torch.optim.Adam(state.parameters_for(config.trainable), lr=config.lr)
    meta = manifest["optim"]
    if meta is None:
        return opt
    sd = {"param_groups": meta["param_groups"], "state": {}}
    for pid, keys in meta["state_keys"].items():
        entry = {}
        for key, val in keys:
            if val == "tensor":
                entry[key] = torch.from_numpy(tensors[f"optim/{pid}/{key}"])
            else:
                entry[key] = val
        sd["state"][int(pid)] = entry
    opt.load_state_dict(sd)
    return opt


# --- sampling --------------------------------------------------------------


@dataclass
class SampleRequest:
    """What to generate: caption, per-frame controls, and sampler knobs."""

    caption: str
    controls: np.ndarray              # [N, 1, H, W]
    threshold: float = 0.1
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    iterations: int = 1
    frames_per_iteration: int = 8
    source_video: np.ndarray | None = None  # optional [N, 3, H, W] motion source
    ddim_steps: int | None = None
    clip_denoised: bool = True

    def total_frames(self) -> int:
        f, k = self.frames_per_iteration, self.iterations
        return f + (k - 1) * (f - 1)


@dataclass
class SampleResult:
    frames: np.ndarray                 # [F, 3, H, W]
    initial_noise: InitialNoise | None
    first_frame_latent: torch.Tensor | None = None


def _schedule_for(state: PipelineState, req: SampleRequest) -> DiffusionSchedule:
    sched = state.schedule
    if req.ddim_steps is not None and req.ddim_steps != sched.ddim_steps:
        sched = DiffusionSchedule(timesteps=sched.timesteps,
                                  beta_start=sched.beta_start,
                                  beta_end=sched.beta_end,
                                  ddim_steps=req.ddim_steps)
    return sched


def _contexts_pair(state: PipelineState, caption: str) -> torch.Tensor:
    cond = state.text.encode(caption).values
    null = state.text.null_context().values
    return torch.stack([null, cond])


def sample_first_frame(state: PipelineState, req: SampleRequest) -> SampleResult:
    """Generate the opening frame from its control map and the caption.

    Single-frame DDIM with plain text guidance; dual guidance degenerates
    at one frame because the frame-independent prediction is the
    prediction itself.
    """
    if len(req.controls) < 1:
        raise ValueError("request carries no control maps")
    model, codec = state.model, state.codec
    sched = _schedule_for(state, req)
    h = req.controls.shape[2] // codec.downsample
    w = req.controls.shape[3] // codec.downsample
    rng = np.random.default_rng(derive_seed(req.seed, "first"))
    x = torch.from_numpy(rng.standard_normal(
        (1, codec.latent_channels, h, w)).astype(np.float32))
    ctl = torch.from_numpy(req.controls[0:1].astype(np.float32))
    ctl2 = ctl.unsqueeze(0).expand(2, *ctl.shape)
    ctx2 = _contexts_pair(state, req.caption)
    clip = req.clip_denoised and state.config.codec_mode == "pixel"
    with torch.no_grad():
        for t, t_prev in sched.ddim_pairs():
            x2 = x.unsqueeze(0).expand(2, *x.shape)
            eps = model(x2, torch.tensor([t, t]), ctx2, control=ctl2)
            eps_hat = guidance_text(eps[1], eps[0], req.guidance.text_scale)
            x = ddim_step(x, eps_hat, t, t_prev, sched, clip_x0=clip)
        frame = codec.decode(LatentSequence(z=x, codec_id=codec.codec_id))
    return SampleResult(frames=frame.numpy(), initial_noise=None,
                        first_frame_latent=x[0])


def sample_video(state: PipelineState, req: SampleRequest,
                 first_frame: np.ndarray) -> SampleResult:
    """Roll out one clip conditioned on a given first frame.

    Initial noise comes from the residual masks of the motion source (the
    control-map sequence replicated to three channels, or the supplied
    source video when editing real footage).  Frame 0 carries the clean
    first-frame latent through every step and is returned untouched.
    """
    frames = req.frames_per_iteration
    if len(req.controls) < frames:
        raise ValueError(
            f"request needs {frames} control maps, got {len(req.controls)}")
    controls = req.controls[:frames]
    model, codec = state.model, state.codec
    sched = _schedule_for(state, req)
    if req.source_video is not None:
        if len(req.source_video) < frames:
            raise ValueError(
                f"source video has {len(req.source_video)} frames, need {frames}")
        motion_source = req.source_video[:frames]
    else:
        motion_source = np.repeat(controls, 3, axis=1)
    ini = init_noise(motion_source, req.threshold,
                     derive_seed(req.seed, "video"),
                     channels=codec.latent_channels,
                     downsample=codec.downsample)
    x = torch.from_numpy(ini.noise.astype(np.float32))
    z1 = codec.encode(torch.from_numpy(first_frame[None].astype(np.float32))).z[0]
    x[0] = z1
    flags = torch.zeros(1, frames, dtype=torch.bool)
    flags[0, 0] = True
    ctl = torch.from_numpy(controls.astype(np.float32))
    ctl2 = ctl.unsqueeze(0).expand(2, *ctl.shape)
    ctx2 = _contexts_pair(state, req.caption)
    ctx_null = state.text.null_context().values
    clip = req.clip_denoised and state.config.codec_mode == "pixel"
    dual = req.guidance.mode == "dual"
    with torch.no_grad():
        for t, t_prev in sched.ddim_pairs():
            x2 = x.unsqueeze(0).expand(2, *x.shape)
            eps = model(x2, torch.tensor([t, t]), ctx2, control=ctl2,
                        cond_flags=flags.expand(2, frames))
            if dual:
                # Frame-by-frame prediction with the null prompt is the
                # negative: frames become the batch, no conditioning flag.
                eps_i = model(x.unsqueeze(1), torch.full((frames,), t),
                              ctx_null.unsqueeze(0).expand(frames, -1, -1),
                              control=ctl.unsqueeze(1),
                              temporal_enabled=False)[:, 0]
                eps_hat = guidance_dual(eps_i, eps[0], eps[1],
                                        req.guidance.video_scale,
                                        req.guidance.text_scale)
            else:
                eps_hat = guidance_text(eps[1], eps[0], req.guidance.text_scale)
            x[1:] = ddim_step(x[1:], eps_hat[1:], t, t_prev, sched, clip_x0=clip)
            x[0] = z1
        tail = codec.decode(LatentSequence(z=x[1:], codec_id=codec.codec_id))
    out = np.concatenate([first_frame[None], tail.numpy()])
    return SampleResult(frames=out, initial_noise=ini, first_frame_latent=z1)


def sample_long(state: PipelineState, req: SampleRequest) -> SampleResult:
    """Auto-regressive long-video generation.

    Iteration 1 generates its first frame from the first control map;
    every later iteration is conditioned on the last frame of the previous
    one, whose control map is shared, so K iterations of F frames yield
    F + (K-1)(F-1) frames with each junction frame appearing once.
    """
    f, k = req.frames_per_iteration, req.iterations
    if k < 1:
        raise ValueError(f"iterations must be >= 1, got {k}")
    needed = req.total_frames()
    if len(req.controls) < needed:
        raise ValueError(
            f"{k} iterations x {f} frames need {needed} control maps "
            f"(shared junctions), got {len(req.controls)}")
    first = sample_first_frame(state, req)
    chunks = [first.frames]
    last_frame = first.frames[0]
    for it in range(k):
        start = it * (f - 1)
        sub = replace(req, controls=req.controls[start: start + f],
                      seed=derive_seed(req.seed, f"video{it}"),
                      source_video=(None if req.source_video is None
                                    else req.source_video[start: start + f]))
        clip_result = sample_video(state, sub, last_frame)
        # Frame 0 is the shared junction and already emitted.
        chunks.append(clip_result.frames[1:])
        last_frame = clip_result.frames[-1]
    return SampleResult(frames=np.concatenate(chunks), initial_noise=None)


def sample_scene(state: PipelineState, sample: VideoSample,
                 guidance: GuidanceConfig | None = None, seed: int = 0,
                 ddim_steps: int | None = None) -> SampleResult:
    """Generate a clip from a scene's controls and caption (one iteration)."""
    req = SampleRequest(
        caption=sample.caption,
        controls=sample.control(state.config.control_type),
        threshold=state.config.noise_threshold,
        guidance=guidance or GuidanceConfig(),
        seed=seed,
        frames_per_iteration=sample.spec.frames,
        ddim_steps=ddim_steps,
    )
    first = sample_first_frame(state, req)
    return sample_video(state, req, first.frames[0])


def mean_depth_error(state: PipelineState, scenes: list[VideoSample],
                     guidance: GuidanceConfig | None = None, seed: int = 0,
                     ddim_steps: int | None = None) -> float:
    """Average depth-map error of generated clips against their controls."""
    from .metrics import depth_error

    errors = []
    for i, scene in enumerate(scenes):
        out = sample_scene(state, scene, guidance=guidance,
                           seed=derive_seed(seed, f"eval{i}"),
                           ddim_steps=ddim_steps)
        errors.append(depth_error(scene.depth_maps, out.frames))
    return float(np.mean(errors))
