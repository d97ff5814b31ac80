import numpy as np
import pytest
import torch

from ctrlvid.denoiser import Denoiser, DenoiserConfig
from ctrlvid.scenes import SceneSpec, ShapeSpec, generate_scene
from ctrlvid.textcond import TextEncoder, Vocabulary

torch.set_num_threads(1)


def tiny_denoiser_config(**kw) -> DenoiserConfig:
    """Small config that still exercises both attention levels."""
    base = dict(widths=(8, 16, 24), attn_levels=(1, 2), emb_width=32,
                context_width=64, stem_stride=1)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return Vocabulary()


@pytest.fixture()
def text_encoder(vocab) -> TextEncoder:
    torch.manual_seed(0)
    return TextEncoder(vocab)


@pytest.fixture()
def tiny_model() -> Denoiser:
    torch.manual_seed(0)
    return Denoiser(tiny_denoiser_config())


@pytest.fixture(scope="session")
def square_scene():
    spec = SceneSpec(
        shapes=(ShapeSpec("square", 0, 20.0, 24.0, 2.0, 1.0, 16.0),),
        background_hue=6, frames=8, height=64, width=64, seed=11)
    return generate_scene(spec)


@pytest.fixture(scope="session")
def static_scene():
    spec = SceneSpec(
        shapes=(ShapeSpec("circle", 4, 32.0, 32.0, 0.0, 0.0, 18.0),),
        background_hue=7, frames=4, height=64, width=64, seed=12)
    return generate_scene(spec)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
