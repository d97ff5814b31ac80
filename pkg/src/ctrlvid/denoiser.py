"""Spatial-temporal denoising UNet with a control branch.

The main branch is a small three-resolution UNet over latent clips; the
control branch is a structural copy of its encoder (with its own temporal
layers) that consumes the noisy latents plus embedded control maps and
feeds per-stage residuals into the decoder's skip connections through
zero-initialized 1x1 projections.  Temporal layers start as identities
and attention blocks start with zero output projections, so the freshly
initialized video model is exactly the per-frame image model.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (CrossAttention, ResBlock, SpatialTemporalSelfAttention,
                     TemporalAttention, TemporalConv, timestep_embedding,
                     zero_module, _group_norm)
from .textcond import Context


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    control_channels: int = 1
    widths: tuple[int, ...] = (64, 96, 128)
    attn_levels: tuple[int, ...] = (1, 2)
    emb_width: int = 128
    context_width: int = 64
    stem_stride: int = 1
    control_downsample: int = 1  # control-map resolution over latent resolution

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.attn_levels = tuple(self.attn_levels)
        for a in self.attn_levels:
            if not 0 <= a < len(self.widths):
                raise ValueError(f"attention level {a} outside widths {self.widths}")
        if self.stem_stride not in (1, 2):
            raise ValueError(f"stem stride must be 1 or 2, got {self.stem_stride}")

    @classmethod
    def tiny(cls, **kw) -> "DenoiserConfig":
        """CPU-friendly configuration used by tests and the toy runs."""
        base = dict(widths=(16, 32, 64), attn_levels=(1, 2), emb_width=64,
                    stem_stride=2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "control_channels": self.control_channels,
                "widths": list(self.widths),
                "attn_levels": list(self.attn_levels),
                "emb_width": self.emb_width,
                "context_width": self.context_width,
                "stem_stride": self.stem_stride,
                "control_downsample": self.control_downsample}

    @classmethod
    def from_dict(cls, raw: dict) -> "DenoiserConfig":
        raw = dict(raw)
        raw["widths"] = tuple(raw["widths"])
        raw["attn_levels"] = tuple(raw["attn_levels"])
        return cls(**raw)


@dataclass
class DenoiserInput:
    """One clip's worth of inputs to the denoiser.

    When ``first_frame_latent`` is present, frame 0 of ``x_t`` is the clean
    conditioning latent (substituted here, never noised) and its output
    position is excluded from the loss by the caller.
    """

    x_t: torch.Tensor                       # [F, C_z, h, w]
    t: int
    context: Context
    control: torch.Tensor | None = None     # [F, C_ctl, H, W]
    first_frame_latent: torch.Tensor | None = None  # [C_z, h, w]
    temporal_enabled: bool = True


class NonFiniteActivation(RuntimeError):
    def __init__(self, stage: str):
        super().__init__(f"non-finite activations after stage {stage!r}")
        self.stage = stage


def _check_finite(h: torch.Tensor, stage: str) -> None:
    # Single-pass probe: any inf/nan contaminates the float64 sum.
    # Activations are far too small for 1e6-element sums to overflow.
    if not torch.isfinite(h.sum(dtype=torch.float64)):
        raise NonFiniteActivation(stage)


class _Level(nn.Module):
    """One encoder level: resblock, temporal conv, optional attention trio."""

    def __init__(self, cfg: DenoiserConfig, width: int, attend: bool):
        super().__init__()
        self.res = ResBlock(width, width, cfg.emb_width)
        self.tconv = TemporalConv(width)
        self.attend = attend
        if attend:
            self.attn = SpatialTemporalSelfAttention(width)
            self.xattn = CrossAttention(width, cfg.context_width)
            self.tattn = TemporalAttention(width)

    def forward(self, h, emb, context, temporal):
        h = self.res(h, emb)
        h = self.tconv(h, temporal)
        if self.attend:
            h = self.attn(h, temporal)
            h = self.xattn(h, context)
            h = self.tattn(h, temporal)
        return h


class _Encoder(nn.Module):
    """Shared structure of the main encoder and its control-branch copy."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.widths
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3,
                              stride=cfg.stem_stride, padding=1)
        self.levels = nn.ModuleList(
            _Level(cfg, w[i], i in cfg.attn_levels) for i in range(len(w)))
        self.downs = nn.ModuleList(
            nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1)
            for i in range(len(w) - 1))
        mid_attend = (len(w) - 1) in cfg.attn_levels
        self.mid1 = _Level(cfg, w[-1], mid_attend)
        self.mid2 = ResBlock(w[-1], w[-1], cfg.emb_width)

    def forward(self, x, emb, context, temporal, hint=None, check=_check_finite):
        b, f = x.shape[:2]
        h = self.stem(x.reshape(b * f, *x.shape[2:])).reshape(b, f, -1, *(
            s // self.stem.stride[0] for s in x.shape[3:]))
        if hint is not None:
            h = h + hint
        check(h, "stem")
        skips = []
        for i, level in enumerate(self.levels):
            h = level(h, emb, context, temporal)
            skips.append(h)
            if i < len(self.downs):
                d = self.downs[i]
                b, f = h.shape[:2]
                h = d(h.reshape(b * f, *h.shape[2:]))
                h = h.reshape(b, f, *h.shape[1:])
            check(h, f"down{i}")
        h = self.mid1(h, emb, context, temporal)
        h = self.mid2(h, emb)
        check(h, "mid")
        return h, skips


def _hint_stem(cfg: DenoiserConfig) -> nn.Sequential:
    """Embed control maps down to the first feature resolution."""
    total = cfg.control_downsample * cfg.stem_stride
    layers: list[nn.Module] = [nn.Conv2d(cfg.control_channels, 16, 3, padding=1),
                               nn.SiLU()]
    ch = 16
    while total > 1:
        layers += [nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU()]
        total //= 2
    layers.append(nn.Conv2d(ch, cfg.widths[0], 3, padding=1))
    return nn.Sequential(*layers)


class _LevelUp(nn.Module):
    """Decoder level: skip concat + resblock, temporal conv, attention trio."""

    def __init__(self, cfg: DenoiserConfig, level: int):
        super().__init__()
        width = cfg.widths[level]
        self.res = ResBlock(2 * width, width, cfg.emb_width)
        self.tconv = TemporalConv(width)
        self.attend = level in cfg.attn_levels
        if self.attend:
            self.attn = SpatialTemporalSelfAttention(width)
            self.xattn = CrossAttention(width, cfg.context_width)
            self.tattn = TemporalAttention(width)

    def forward(self, h, emb, context, temporal):
        h = self.res(h, emb)
        h = self.tconv(h, temporal)
        if self.attend:
            h = self.attn(h, temporal)
            h = self.xattn(h, context)
            h = self.tattn(h, temporal)
        return h


class Denoiser(nn.Module):
    """Noise-prediction model epsilon(x_t, t, context, control, first frame)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.emb_width, cfg.emb_width), nn.SiLU(),
            nn.Linear(cfg.emb_width, cfg.emb_width))
        # Learned marker added to the timestep embedding of clean
        # conditioning frames; zero at init so flags are inert untrained.
        self.cond_flag_emb = nn.Parameter(torch.zeros(cfg.emb_width))

        self.main = _Encoder(cfg)
        self.ctrl = _Encoder(cfg)
        self.hint = _hint_stem(cfg)
        self.inject = nn.ModuleList(
            zero_module(nn.Conv2d(w[i], w[i], 1)) for i in range(len(w)))
        self.inject_mid = zero_module(nn.Conv2d(w[-1], w[-1], 1))

        self.up_res = nn.ModuleList(
            _LevelUp(cfg, i) for i in range(len(w)))
        self.up_convs = nn.ModuleList(
            nn.Conv2d(w[i], w[i - 1], 3, padding=1) for i in range(1, len(w)))
        head: list[nn.Module] = [_group_norm(w[0]), nn.SiLU()]
        if cfg.stem_stride == 2:
            head += [nn.Upsample(scale_factor=2, mode="nearest"),
                     nn.Conv2d(w[0], w[0], 3, padding=1), nn.SiLU()]
        head.append(nn.Conv2d(w[0], cfg.in_channels, 3, padding=1))
        self.head = nn.Sequential(*head)

    def control_features(self, x, emb, context, control, temporal):
        """Control-branch pass; returns per-stage injection residuals."""
        b, f = control.shape[:2]
        if f != x.shape[1]:
            raise ValueError(
                f"control has {f} frames but latents have {x.shape[1]}")
        hint = self.hint(control.reshape(b * f, *control.shape[2:]))
        hint = hint.reshape(b, f, *hint.shape[1:])
        mid, skips = self.ctrl(x, emb, context, temporal, hint=hint)
        residuals = [zc(s.reshape(-1, *s.shape[2:])).reshape(s.shape)
                     for zc, s in zip(self.inject, skips)]
        mid_res = self.inject_mid(mid.reshape(-1, *mid.shape[2:])).reshape(mid.shape)
        return residuals, mid_res

    def forward(self, x, t, context, control=None, cond_flags=None,
                temporal_enabled=True):
        """Predict noise for a batch of clips.

        x:          [B, F, C_z, h, w]
        t:          [B] integer timesteps (shared across frames of a clip)
        context:    [B, L_txt, C_txt]
        control:    [B, F, C_ctl, H, W] or None
        cond_flags: [B, F] bool, marks clean conditioning frames
        """
        if x.ndim != 5:
            raise ValueError(f"expected latents [B, F, C, h, w], got {tuple(x.shape)}")
        _check_finite(x, "input")
        b, f = x.shape[:2]
        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.cfg.emb_width).to(x.dtype))
        emb = emb[:, None, :].expand(b, f, -1)
        if cond_flags is not None:
            emb = emb + cond_flags.to(x.dtype)[:, :, None] * self.cond_flag_emb

        if control is not None:
            inj, inj_mid = self.control_features(x, emb, context, control,
                                                 temporal_enabled)
        else:
            inj, inj_mid = None, None

        h, skips = self.main(x, emb, context, temporal_enabled)
        if inj is not None:
            skips = [s + r for s, r in zip(skips, inj)]
            h = h + inj_mid
        for i in reversed(range(len(self.cfg.widths))):
            h = torch.cat([h, skips[i]], dim=2)
            h = self.up_res[i](h, emb, context, temporal_enabled)
            _check_finite(h, f"up{i}")
            if i > 0:
                bb, ff = h.shape[:2]
                y = h.reshape(bb * ff, *h.shape[2:])
                y = F.interpolate(y, scale_factor=2, mode="nearest")
                y = self.up_convs[i - 1](y)
                h = y.reshape(bb, ff, *y.shape[1:])
        bb, ff = h.shape[:2]
        out = self.head(h.reshape(bb * ff, *h.shape[2:]))
        out = out.reshape(bb, ff, *out.shape[1:])
        _check_finite(out, "head")
        return out

    def parameter_groups(self) -> dict[str, list[str]]:
        """Named-parameter sets behind the trainable-set selector.

        "spatial" is the image-model analog: everything except the
        temporal layers and the conditioning-frame marker.  "temporal" is
        what the video phase trains: temporal conv/attention, the control
        injection projections, and the conditioning-frame marker.  The
        injections belong to both (they are part of the image control
        model and stay trainable in the video phase).
        """
        temporal, spatial = [], []
        for name, _ in self.named_parameters():
            if ".tconv" in name or ".tattn" in name or name == "cond_flag_emb":
                temporal.append(name)
            else:
                spatial.append(name)
                if "inject" in name:
                    temporal.append(name)
        return {"temporal": temporal, "spatial": spatial}


def predict_noise(model: Denoiser, inp: DenoiserInput) -> torch.Tensor:
    """Single-clip noise prediction honoring first-frame conditioning."""
    x = inp.x_t
    cond_flags = None
    if inp.first_frame_latent is not None:
        x = x.clone()
        x[0] = inp.first_frame_latent
        cond_flags = torch.zeros(1, x.shape[0], dtype=torch.bool)
        cond_flags[0, 0] = True
    control = None if inp.control is None else inp.control.unsqueeze(0)
    out = model(x.unsqueeze(0), torch.tensor([inp.t]),
                inp.context.values.unsqueeze(0), control=control,
                cond_flags=cond_flags, temporal_enabled=inp.temporal_enabled)
    return out[0]


def predict_noise_independent(model: Denoiser, inp: DenoiserInput) -> torch.Tensor:
    """Frame-by-frame prediction: every frame runs as its own one-frame clip.

    Temporal layers see a single frame, spatial-temporal attention
    degenerates to spatial attention, and first-frame conditioning is
    dropped.
    """
    frames = inp.x_t.shape[0]
    x = inp.x_t.unsqueeze(1)  # [F, 1, C, h, w]: frames become the batch
    control = None if inp.control is None else inp.control.unsqueeze(1)
    ctx = inp.context.values.unsqueeze(0).expand(frames, -1, -1)
    out = model(x, torch.full((frames,), inp.t), ctx, control=control,
                cond_flags=None, temporal_enabled=False)
    return out[:, 0]
