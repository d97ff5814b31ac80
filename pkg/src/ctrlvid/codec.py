"""Frame codec between pixel space and the diffusion latent space.

Two interchangeable modes sit behind one interface: a pixel-space codec
(an exact affine bijection, no parameters) and a small learned
convolutional autoencoder.  Everything downstream of this module treats
the mode as configuration, not as a separate code path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt


@dataclass
class CodecConfig:
    mode: str = "pixel"
    downsample: int = 4
    latent_channels: int = 4
    epochs: int = 150
    lr: float = 2e-3
    batch_size: int = 32
    variance_weight: float = 0.1

    def __post_init__(self):
        if self.mode not in ("pixel", "learned"):
            raise ValueError(f"codec mode must be 'pixel' or 'learned', got {self.mode!r}")


@dataclass
class LatentSequence:
    z: torch.Tensor  # [F, C_z, h, w]
    codec_id: str


def _check_frames(frames: torch.Tensor, downsample: int) -> torch.Tensor:
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected frames shaped [F, 3, H, W], got {tuple(frames.shape)}")
    _, _, h, w = frames.shape
    if h % downsample:
        raise ValueError(f"height {h} not divisible by downsample factor {downsample}")
    if w % downsample:
        raise ValueError(f"width {w} not divisible by downsample factor {downsample}")
    return frames


class PixelCodec:
    """Identity-up-to-range codec: z = 2x - 1, per frame, no parameters."""

    downsample = 1
    latent_channels = 3
    codec_id = "pixel:v1"

    def encode(self, frames: torch.Tensor) -> LatentSequence:
        frames = _check_frames(frames, 1)
        return LatentSequence(z=frames * 2.0 - 1.0, codec_id=self.codec_id)

    def decode(self, latents: LatentSequence) -> torch.Tensor:
        if latents.codec_id != self.codec_id:
            raise ValueError(
                f"latents were produced by codec {latents.codec_id!r}, "
                f"not {self.codec_id!r}"
            )
        return ((latents.z + 1.0) / 2.0).clamp(0.0, 1.0)


class ConvCodec(nn.Module):
    """Small per-frame convolutional autoencoder (factor-4 downsample)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        if config.downsample != 4:
            raise ValueError("learned codec supports downsample factor 4 only")
        self.config = config
        cz = config.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(64, cz, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(cz, 64, 3, padding=1), nn.SiLU(),
            nn.Conv2d(64, 32 * 4, 3, padding=1), nn.PixelShuffle(2), nn.SiLU(),
            nn.Conv2d(32, 16 * 4, 3, padding=1), nn.PixelShuffle(2), nn.SiLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )
        self._codec_id: str | None = None

    @property
    def downsample(self) -> int:
        return self.config.downsample

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def codec_id(self) -> str:
        if self._codec_id is None:
            self._codec_id = "conv:" + self.param_hash()[:16]
        return self._codec_id

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.detach().numpy()).tobytes())
        return h.hexdigest()

    def mark_updated(self) -> None:
        self._codec_id = None

    def encode(self, frames: torch.Tensor) -> LatentSequence:
        frames = _check_frames(frames, self.downsample)
        with torch.no_grad():
            z = self.encoder(frames * 2.0 - 1.0)
        return LatentSequence(z=z, codec_id=self.codec_id)

    def decode(self, latents: LatentSequence) -> torch.Tensor:
        if latents.codec_id != self.codec_id:
            raise ValueError(
                f"latents were produced by codec {latents.codec_id!r}, "
                f"not {self.codec_id!r}"
            )
        with torch.no_grad():
            x = self.decoder(latents.z)
        return x.clamp(0.0, 1.0)

    def reconstruct(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Differentiable round trip used by training; returns (recon, z)."""
        z = self.encoder(frames * 2.0 - 1.0)
        return self.decoder(z), z


@dataclass
class CodecTrainResult:
    codec: ConvCodec
    losses: list[float] = field(default_factory=list)
    diverged: bool = False


def train_codec(frames: np.ndarray, config: CodecConfig, seed: int = 0) -> CodecTrainResult:
    """Fit the learned codec to a stack of frames [N, 3, H, W] in [0, 1].

    Loss is reconstruction MSE plus a soft unit-variance penalty on the
    latents.  A non-finite loss aborts the run and restores the last
    finished epoch's parameters.
    """
    if config.mode != "learned":
        raise ValueError("train_codec requires a learned-mode config")
    if len(frames) == 0:
        raise ValueError("cannot train a codec on an empty dataset")
    torch.manual_seed(seed)
    codec = ConvCodec(config)
    data = torch.from_numpy(np.asarray(frames, dtype=np.float32))
    _check_frames(data, config.downsample)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    rng = np.random.default_rng(seed)
    result = CodecTrainResult(codec=codec)
    last_good = {k: v.clone() for k, v in codec.state_dict().items()}
    for _ in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), config.batch_size):
            batch = data[order[start: start + config.batch_size]]
            recon, z = codec.reconstruct(batch)
            loss = F.mse_loss(recon, batch)
            loss = loss + config.variance_weight * (z.pow(2).mean() - 1.0) ** 2
            if not torch.isfinite(loss):
                codec.load_state_dict(last_good)
                codec.mark_updated()
                result.diverged = True
                return result
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(batch)
        sched.step()
        result.losses.append(epoch_loss / len(data))
        last_good = {k: v.clone() for k, v in codec.state_dict().items()}
    codec.mark_updated()
    return result


def make_codec(config: CodecConfig):
    if config.mode == "pixel":
        return PixelCodec()
    return ConvCodec(config)


def save_codec(codec: ConvCodec, path: str | Path) -> str:
    path = Path(path)
    tensors = {k: v.detach().numpy() for k, v in codec.state_dict().items()}
    content = ckpt.save_tensors(path, tensors)
    ckpt.write_json(path.with_suffix(".json"), {
        "mode": "learned",
        "downsample": codec.config.downsample,
        "latent_channels": codec.config.latent_channels,
        "content_hash": content,
    })
    return content


def load_codec(path: str | Path) -> ConvCodec:
    path = Path(path)
    manifest = ckpt.read_json(path.with_suffix(".json"))
    tensors = ckpt.load_tensors(path, expect_hash=manifest["content_hash"])
    config = CodecConfig(mode="learned", downsample=manifest["downsample"],
                         latent_channels=manifest["latent_channels"])
    codec = ConvCodec(config)
    codec.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    codec.mark_updated()
    return codec
