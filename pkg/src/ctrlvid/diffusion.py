"""Forward diffusion, training losses, guidance, and the DDIM update.

The schedule is the usual linear-variance Markov chain; training draws one
shared timestep per clip, keeps the first frame clean, and regresses the
model output onto the (residual-initialized) noise of frames 1..F-1.
Both guidance rules are written exactly in their affine forms so their
algebraic reductions hold to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .noiseinit import init_noise


@dataclass
class DiffusionSchedule:
    """Variance schedule plus the DDIM timestep subsequence."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 20

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError(
                f"need 0 < beta_start < beta_end < 1, got "
                f"{self.beta_start}, {self.beta_end}"
            )
        if not 1 <= self.ddim_steps <= self.timesteps:
            raise ValueError(f"ddim_steps {self.ddim_steps} outside [1, {self.timesteps}]")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.timesteps,
                                 dtype=np.float64)
        alphas = 1.0 - self.betas
        # alpha_bar[t] = prod_{s<=t} alpha_s, with alpha_bar[0] = 1 so the
        # final DDIM step (t_prev = 0) returns the predicted clean signal.
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")
        return t

    def ddim_pairs(self) -> list[tuple[int, int]]:
        """Descending (t, t_prev) pairs for the uniform DDIM subsequence."""
        taus = np.unique(np.linspace(0, self.timesteps, self.ddim_steps + 1,
                                     dtype=np.int64))
        pairs = list(zip(taus[1:], taus[:-1]))
        return [(int(t), int(p)) for t, p in reversed(pairs)]


@dataclass
class GuidanceConfig:
    text_scale: float = 10.0
    video_scale: float = 1.5
    mode: str = "dual"

    def __post_init__(self):
        if self.text_scale < 0 or self.video_scale < 0:
            raise ValueError("guidance scales must be non-negative")
        if self.mode not in ("text_only", "dual"):
            raise ValueError(f"guidance mode must be 'text_only' or 'dual', got {self.mode!r}")


def q_sample(z0, t: int, noise, schedule: DiffusionSchedule):
    """Closed-form forward process: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) noise."""
    t = schedule.check_timestep(t)
    a = schedule.alpha_bar[t]
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise


def guidance_text(eps_cond, eps_null, text_scale: float):
    """Classifier-free guidance against the null-text prediction."""
    return eps_null + text_scale * (eps_cond - eps_null)


def guidance_dual(eps_indep, eps_null, eps_cond, video_scale: float,
                  text_scale: float):
    """Guidance that also treats frame-by-frame prediction as a negative.

    Affine in every argument with coefficients summing to one; with
    video_scale = 1 (or eps_indep equal to eps_null) it collapses exactly
    to plain text guidance.
    """
    return (eps_indep
            + video_scale * (eps_null - eps_indep)
            + text_scale * (eps_cond - eps_null))


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule,
              clip_x0: bool = False):
    """One deterministic sampler update from timestep t to t_prev."""
    t = schedule.check_timestep(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    a_t = schedule.alpha_bar[t]
    a_p = schedule.alpha_bar[t_prev]
    x0 = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    if clip_x0:
        x0 = x0.clamp(-1.0, 1.0) if torch.is_tensor(x0) else np.clip(x0, -1.0, 1.0)
    return math.sqrt(a_p) * x0 + math.sqrt(1.0 - a_p) * eps_hat


@dataclass
class Batch:
    """A training minibatch: pixel frames, control maps, text contexts."""

    frames: torch.Tensor    # [B, F, 3, H, W]
    controls: torch.Tensor  # [B, F, C_ctl, H, W]
    contexts: torch.Tensor  # [B, L_txt, C_txt]


def _encode_clips(codec, frames: torch.Tensor) -> torch.Tensor:
    b, f = frames.shape[:2]
    z = codec.encode(frames.reshape(b * f, *frames.shape[2:])).z
    return z.reshape(b, f, *z.shape[1:])


def _training_noise(frames: torch.Tensor, codec, rng: np.random.Generator,
                    residual_noise: bool, threshold: float,
                    latent_shape: tuple[int, ...]) -> torch.Tensor:
    if not residual_noise:
        eps = rng.standard_normal((frames.shape[0],) + latent_shape)
        return torch.from_numpy(eps.astype(np.float32))
    clips = []
    for b in range(frames.shape[0]):
        seed = int(rng.integers(0, 2**63 - 1))
        clips.append(init_noise(frames[b].numpy(), threshold, seed,
                                channels=latent_shape[1],
                                downsample=codec.downsample).noise)
    return torch.from_numpy(np.stack(clips).astype(np.float32))


def loss_video(batch: Batch, model, codec, schedule: DiffusionSchedule,
               rng: np.random.Generator, residual_noise: bool = True,
               threshold: float = 0.1, noise: torch.Tensor | None = None,
               timesteps: np.ndarray | None = None) -> torch.Tensor:
    """First-frame-conditioned noise-prediction loss on clips of F >= 2.

    The first frame stays clean (its latent is the conditioning signal and
    its output position is excluded); remaining frames are noised with
    residual-initialized noise drawn from the source frames.
    """
    frames = batch.frames
    if frames.ndim != 5 or frames.shape[1] < 2:
        raise ValueError(
            "loss_video needs clips with at least 2 frames; "
            "route single-frame batches to loss_image")
    b, f = frames.shape[:2]
    z0 = _encode_clips(codec, frames)
    if noise is None:
        noise = _training_noise(frames, codec, rng, residual_noise, threshold,
                                z0.shape[1:])
    if timesteps is None:
        timesteps = rng.integers(1, schedule.timesteps + 1, size=b)
    coeff = schedule.alpha_bar[np.asarray(timesteps)]
    sa = torch.from_numpy(np.sqrt(coeff).astype(np.float32))[:, None, None, None, None]
    sn = torch.from_numpy(np.sqrt(1.0 - coeff).astype(np.float32))[:, None, None, None, None]
    x_t = sa * z0 + sn * noise
    x_t[:, 0] = z0[:, 0]
    flags = torch.zeros(b, f, dtype=torch.bool)
    flags[:, 0] = True
    pred = model(x_t, torch.from_numpy(np.asarray(timesteps)), batch.contexts,
                 control=batch.controls, cond_flags=flags)
    return F.mse_loss(pred[:, 1:], noise[:, 1:])


def loss_image(batch: Batch, model, codec, schedule: DiffusionSchedule,
               rng: np.random.Generator, noise: torch.Tensor | None = None,
               timesteps: np.ndarray | None = None) -> torch.Tensor:
    """Plain controlled noise-prediction loss on single-frame clips."""
    frames = batch.frames
    if frames.ndim != 5 or frames.shape[1] != 1:
        raise ValueError(f"loss_image expects [B, 1, 3, H, W], got {tuple(frames.shape)}")
    b = frames.shape[0]
    z0 = _encode_clips(codec, frames)
    if noise is None:
        eps = rng.standard_normal(z0.shape)
        noise = torch.from_numpy(eps.astype(np.float32))
    if timesteps is None:
        timesteps = rng.integers(1, schedule.timesteps + 1, size=b)
    coeff = schedule.alpha_bar[np.asarray(timesteps)]
    sa = torch.from_numpy(np.sqrt(coeff).astype(np.float32))[:, None, None, None, None]
    sn = torch.from_numpy(np.sqrt(1.0 - coeff).astype(np.float32))[:, None, None, None, None]
    x_t = sa * z0 + sn * noise
    pred = model(x_t, torch.from_numpy(np.asarray(timesteps)), batch.contexts,
                 control=batch.controls, cond_flags=None)
    return F.mse_loss(pred, noise)
