"""Building blocks of the spatial-temporal denoiser.

Every temporal block is a no-op at initialization (identity temporal
convolution, zero-projected temporal attention) and every attention block
writes through a zero-initialized output projection, so a freshly
constructed video model processes each frame exactly like the image
model.  Tensors flow through as [B, F, C, H, W]: batch of clips, frames,
channels, space.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding [N, dim] of integer timesteps [N]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(torch.get_default_dtype())


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def _merge_frames(h: torch.Tensor) -> torch.Tensor:
    b, f, c, hh, ww = h.shape
    return h.reshape(b * f, c, hh, ww)


def _split_frames(h: torch.Tensor, frames: int) -> torch.Tensor:
    bf, c, hh, ww = h.shape
    return h.reshape(bf // frames, frames, c, hh, ww)


def st_attention(tokens: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                 wv: torch.Tensor, return_weights: bool = False):
    """Spatial-temporal self-attention over per-frame token sequences.

    ``tokens`` is [F, L, C].  Queries are computed per frame; keys and
    values come from the concatenation of all frames, so every query
    position sees the whole clip:

        out_i = softmax(Q_i K^T / sqrt(d)) V,   K, V from [t_0; ...; t_{F-1}]
    """
    f, l, c = tokens.shape
    q = tokens @ wq.T                      # [F, L, C]
    flat = tokens.reshape(f * l, c)        # concatenation over frames
    k = flat @ wk.T
    v = flat @ wv.T
    logits = q @ k.T / math.sqrt(k.shape[-1])   # [F, L, F*L]
    weights = logits.softmax(dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two dims of batched tensors."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return logits.softmax(dim=-1) @ v


class SpatialTemporalSelfAttention(nn.Module):
    """Self-attention whose keys/values span all frames of the clip.

    With a single frame this reduces to ordinary spatial self-attention.
    The output projection starts at zero, so the block is a residual
    no-op at initialization.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wk = nn.Linear(channels, channels, bias=False)
        self.wv = nn.Linear(channels, channels, bias=False)
        self.proj = zero_module(nn.Linear(channels, channels))

    def forward(self, h: torch.Tensor, temporal: bool = True) -> torch.Tensor:
        b, f, c, hh, ww = h.shape
        x = _merge_frames(h)
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [B*F, L, C]
        l = tokens.shape[1]
        q = self.wq(tokens)
        k = self.wk(tokens)
        v = self.wv(tokens)
        if temporal and f > 1:
            # Keys/values concatenated over frames, shared by every frame
            # of the same clip: one attention call per clip, [F*L] queries
            # against [F*L] keys.
            attn = _attend(q.reshape(b, f * l, c), k.reshape(b, f * l, c),
                           v.reshape(b, f * l, c)).reshape(b * f, l, c)
        else:
            attn = _attend(q, k, v)
        out = self.proj(attn).transpose(1, 2).reshape(b * f, c, hh, ww)
        return _split_frames(x + out, f)


class CrossAttention(nn.Module):
    """Per-frame attention from pixel tokens to the text context rows."""

    def __init__(self, channels: int, context_width: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wk = nn.Linear(context_width, channels, bias=False)
        self.wv = nn.Linear(context_width, channels, bias=False)
        self.proj = zero_module(nn.Linear(channels, channels))

    def forward(self, h: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, f, c, hh, ww = h.shape
        x = _merge_frames(h)
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.wq(tokens)
        k = self.wk(context)  # [B, L_txt, C]
        v = self.wv(context)
        attn = _attend(q.reshape(b, f * q.shape[1], c), k, v)
        attn = attn.reshape(b * f, -1, c)
        out = self.proj(attn).transpose(1, 2).reshape(b * f, c, hh, ww)
        return _split_frames(x + out, f)


class TemporalConv(nn.Module):
    """Frame-axis convolution (kernel 3, zero padding) at each location.

    Initialized to the identity: the center tap is the identity matrix and
    all other weights are zero, so the output equals the input bit for bit
    until training moves the kernel.  Implemented as a (3, 1) conv over a
    [B, C, F, H*W] view so the frame axis is convolved in one fused call.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, (3, 1), padding=(1, 0))
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)
        with torch.no_grad():
            self.conv.weight[:, :, 1, 0] = torch.eye(channels)

    def set_kernel(self, taps: tuple[float, float, float]) -> None:
        """Give every channel the same scalar 3-tap kernel (testing hook)."""
        with torch.no_grad():
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)
            eye = torch.eye(self.conv.weight.shape[0])
            for k, tap in enumerate(taps):
                self.conv.weight[:, :, k, 0] = tap * eye

    def forward(self, h: torch.Tensor, temporal: bool = True) -> torch.Tensor:
        if not temporal:
            return h
        b, f, c, hh, ww = h.shape
        x = h.permute(0, 2, 1, 3, 4).reshape(b, c, f, hh * ww)
        x = self.conv(x)
        return x.reshape(b, c, f, hh, ww).permute(0, 2, 1, 3, 4)


class TemporalAttention(nn.Module):
    """Self-attention across the frame axis at each spatial location.

    Residual form with a zero-initialized projection: identity at
    initialization, exactly like the temporal convolution.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wk = nn.Linear(channels, channels, bias=False)
        self.wv = nn.Linear(channels, channels, bias=False)
        self.proj = zero_module(nn.Linear(channels, channels))

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Core attention over [..., F, C] token groups (one per location)."""
        return _attend(self.wq(tokens), self.wk(tokens), self.wv(tokens))

    def forward(self, h: torch.Tensor, temporal: bool = True) -> torch.Tensor:
        if not temporal:
            return h
        b, f, c, hh, ww = h.shape
        x = _merge_frames(h)
        normed = _split_frames(self.norm(x), f)
        # [B, H*W, F, C]: spatial locations ride in the batch-like dims.
        tokens = normed.permute(0, 3, 4, 1, 2).reshape(b, hh * ww, f, c)
        out = self.proj(self.attend(tokens))
        out = out.reshape(b, hh, ww, f, c).permute(0, 3, 4, 1, 2)
        return h + out


class ResBlock(nn.Module):
    """2D residual block with timestep conditioning, applied per frame."""

    def __init__(self, in_channels: int, out_channels: int, emb_width: int):
        super().__init__()
        self.norm1 = _group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_width, out_channels)
        self.norm2 = _group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (nn.Conv2d(in_channels, out_channels, 1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        b, f, c, hh, ww = h.shape
        x = _merge_frames(h)
        y = self.conv1(F.silu(self.norm1(x)))
        y = y + self.emb(F.silu(emb)).reshape(b * f, -1)[:, :, None, None]
        y = self.conv2(F.silu(self.norm2(y)))
        return _split_frames(self.skip(x) + y, f)
