import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ctrlvid.denoiser import DenoiserConfig
from ctrlvid.diffusion import DiffusionSchedule, GuidanceConfig
from ctrlvid.pipeline import (PipelineState, SampleRequest, TrainConfig,
                              build_corpus, derive_seed, init_state,
                              load_checkpoint, resume_optimizer,
                              sample_first_frame, sample_long, sample_video,
                              save_checkpoint, train)
from ctrlvid.scenes import generate_scene, random_scene
from ctrlvid.textcond import TextEncoder, Vocabulary


def micro_config(**kw):
    base = dict(
        steps=4, batch_size=2, lr=1e-4, seed=3,
        num_video_scenes=3, num_image_scenes=2, frames=4, height=32, width=32,
        arch=DenoiserConfig.tiny(widths=(8, 16, 24), attn_levels=(2,),
                                 emb_width=32),
        schedule=DiffusionSchedule(ddim_steps=4),
        log_every=2, checkpoint_every=100,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained_micro(tmp_path_factory):
    cfg = micro_config()
    out = tmp_path_factory.mktemp("micro_ckpt")
    result = train(cfg, checkpoint_dir=out)
    path = save_checkpoint(result.state, out / "final.ckpt")
    return result, path


class TestTrainConfig:
    def test_round_trip(self):
        cfg = micro_config()
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_key_named(self):
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig.from_dict({"learning_rate": 1e-4})

    def test_ratio_validated(self):
        with pytest.raises(ValueError, match="ratio"):
            micro_config(video_image_ratio=(0, 0))

    def test_trainable_selector_validated(self):
        with pytest.raises(ValueError, match="trainable"):
            micro_config(trainable="everything")

    def test_spec_defaults(self):
        cfg = TrainConfig()
        assert cfg.video_image_ratio == (8, 2)
        assert cfg.batch_size == 16
        assert cfg.lr == 1e-5
        assert cfg.steps == 10_000
        assert cfg.schedule.ddim_steps == 20
        assert cfg.noise_threshold == 0.1


class TestCorpus:
    def test_deterministic(self):
        a = build_corpus(3, 4, 32, 32, seed_base=50)
        b = build_corpus(3, 4, 32, 32, seed_base=50)
        for x, y in zip(a, b):
            assert np.array_equal(x.frames, y.frames)
            assert x.caption == y.caption


class TestTrain:
    def test_loss_finite_and_counted(self, trained_micro):
        result, _ = trained_micro
        assert len(result.losses) == 4
        assert all(np.isfinite(result.losses))
        assert result.video_batches + result.image_batches == 4

    def test_video_only_ratio_draws_no_images(self):
        cfg = micro_config(steps=6, video_image_ratio=(10, 0))
        result = train(cfg)
        assert result.image_batches == 0
        assert result.video_batches == 6

    def test_image_only_ratio_draws_no_videos(self):
        cfg = micro_config(steps=5, video_image_ratio=(0, 10))
        result = train(cfg)
        assert result.video_batches == 0

    def test_deterministic_given_seed(self):
        a = train(micro_config())
        b = train(micro_config())
        assert a.losses == b.losses

    def test_trainable_selector_freezes_complement(self):
        cfg = micro_config(steps=2, trainable="temporal")
        state = init_state(cfg)
        before = {n: p.detach().clone()
                  for n, p in state.model.named_parameters()}
        train(cfg, state=state)
        groups = state.model.parameter_groups()
        frozen = set(groups["spatial"]) - set(groups["temporal"])
        moved = set()
        for n, p in state.model.named_parameters():
            if not torch.equal(before[n], p.detach()):
                moved.add(n)
        assert moved, "temporal phase should update something"
        assert not (moved & frozen)

    def test_resume_reproduces_loss_sequence(self, tmp_path):
        full = train(micro_config(steps=6, checkpoint_every=3),
                     checkpoint_dir=tmp_path / "full")
        half_cfg = micro_config(steps=3, checkpoint_every=3)
        first = train(half_cfg, checkpoint_dir=tmp_path / "half")
        ckpt_path = tmp_path / "half" / "step000003.ckpt"
        state, manifest = load_checkpoint(ckpt_path)
        cfg = micro_config(steps=3)
        opt = resume_optimizer(state, manifest, ckpt_path, cfg)
        rest = train(cfg, state=state, rng_state=manifest["np_rng_state"],
                     optimizer=opt)
        assert first.losses + rest.losses == pytest.approx(full.losses, rel=1e-6)

    def test_nan_loss_halts_with_checkpoint(self, tmp_path, monkeypatch):
        cfg = micro_config(steps=5)
        calls = {"n": 0}
        import ctrlvid.pipeline as pl
        real = pl.loss_video

        def sabotage(*args, **kw):
            calls["n"] += 1
            if calls["n"] >= 2:
                return torch.tensor(float("nan"))
            return real(*args, **kw)

        monkeypatch.setattr(pl, "loss_video", sabotage)
        monkeypatch.setattr(pl, "loss_image", sabotage)
        result = train(cfg, checkpoint_dir=tmp_path)
        assert result.diverged
        assert result.checkpoint is not None
        state, _ = load_checkpoint(result.checkpoint)
        for p in state.model.parameters():
            assert torch.isfinite(p).all()


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, trained_micro, tmp_path):
        result, path = trained_micro
        state, _ = load_checkpoint(path)
        again = save_checkpoint(state, tmp_path / "again.ckpt")
        with open(path, "rb") as f1, open(again, "rb") as f2:
            assert f1.read() == f2.read()

    def test_predictions_identical_after_reload(self, trained_micro):
        result, path = trained_micro
        state, _ = load_checkpoint(path)
        x = torch.randn(1, 4, 3, 32, 32)
        ctx = torch.randn(1, 8, 64)
        with torch.no_grad():
            a = result.state.model(x, torch.tensor([500]), ctx)
            b = state.model(x, torch.tensor([500]), ctx)
        assert torch.equal(a, b)

    def test_wrong_vocab_hash_refused(self, trained_micro):
        _, path = trained_micro
        with pytest.raises(ValueError, match="vocabulary hash mismatch"):
            load_checkpoint(path, expect_vocab_hash="f" * 64)

    def test_wrong_codec_refused(self, trained_micro):
        _, path = trained_micro
        with pytest.raises(ValueError, match="codec mismatch"):
            load_checkpoint(path, expect_codec_id="conv:0000")

    def test_optimizer_state_round_trip(self, trained_micro, tmp_path):
        result, _ = trained_micro
        # Use the checkpoint the training loop wrote (it carries Adam state;
        # a bare save_checkpoint without an optimizer records none).
        path = result.checkpoint
        state, manifest = load_checkpoint(path)
        opt = resume_optimizer(state, manifest, path, state.config)
        assert opt.state_dict()["param_groups"][0]["lr"] == state.config.lr
        assert len(opt.state_dict()["state"]) > 0


def planted_stub_state(config, z0, schedule):
    """PipelineState whose 'model' reconstructs the noise of a planted z0."""
    state = init_state(config)

    class Stub:
        def __call__(self, x, t, ctx, control=None, cond_flags=None,
                     temporal_enabled=True):
            ts = torch.as_tensor(t).reshape(-1)
            eps = torch.empty_like(x)
            for b in range(x.shape[0]):
                a = schedule.alpha_bar[int(ts[b])]
                eps[b] = (x[b] - math.sqrt(a) * z0) / math.sqrt(1 - a)
            return eps

    return PipelineState(config=state.config, model=Stub(), text=state.text,
                         vocab=state.vocab, codec=state.codec,
                         schedule=schedule, step=0)


class TestSampleFirstFrame:
    def test_deterministic_given_seed(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(77, frames=4, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=5, frames_per_iteration=4, ddim_steps=4)
        a = sample_first_frame(result.state, req)
        b = sample_first_frame(result.state, req)
        assert np.array_equal(a.frames, b.frames)
        c = sample_first_frame(result.state, replace(req, seed=6))
        assert not np.array_equal(a.frames, c.frames)

    def test_stub_denoiser_returns_decoded_plant(self):
        # DDIM consistency at the pipeline level: a stub reconstructing the
        # planted latent's noise must return decode(z0).
        schedule = DiffusionSchedule()
        cfg = micro_config(schedule=schedule)
        torch.manual_seed(0)
        z0 = torch.rand(3, 32, 32) * 2 - 1
        state = planted_stub_state(cfg, z0, schedule)
        scene = generate_scene(random_scene(78, frames=4, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=1, frames_per_iteration=4)
        out = sample_first_frame(state, req)
        expected = ((z0 + 1) / 2).clamp(0, 1).numpy()
        assert np.abs(out.frames[0] - expected).max() < 1e-4

    def test_missing_controls_rejected(self, trained_micro):
        result, _ = trained_micro
        req = SampleRequest(caption="a red square",
                            controls=np.zeros((0, 1, 32, 32)))
        with pytest.raises(ValueError, match="no control maps"):
            sample_first_frame(result.state, req)


class TestSampleVideo:
    def test_first_frame_bit_identical(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(79, frames=4, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=2, frames_per_iteration=4, ddim_steps=4)
        first = scene.frames[0]
        out = sample_video(result.state, req, first)
        assert np.array_equal(out.frames[0], first)
        assert out.frames.shape == (4, 3, 32, 32)

    def test_threshold_one_records_identical_noise(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(80, frames=4, height=32, width=32))
        static_controls = np.repeat(scene.depth_maps[:1], 4, axis=0)
        req = SampleRequest(caption=scene.caption, controls=static_controls,
                            threshold=1.0, seed=2, frames_per_iteration=4,
                            ddim_steps=4)
        out = sample_video(result.state, req, scene.frames[0])
        noise = out.initial_noise.noise
        for i in range(1, 4):
            assert np.array_equal(noise[i], noise[0])

    def test_control_count_mismatch_rejected(self, trained_micro):
        result, _ = trained_micro
        req = SampleRequest(caption="a", controls=np.zeros((2, 1, 32, 32)),
                            frames_per_iteration=4)
        with pytest.raises(ValueError, match="control maps"):
            sample_video(result.state, req, np.zeros((3, 32, 32)))

    def test_source_video_drives_masks(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(81, frames=4, height=32, width=32))
        req = SampleRequest(caption=scene.caption,
                            controls=np.zeros((4, 1, 32, 32)),
                            threshold=0.1, seed=2, frames_per_iteration=4,
                            ddim_steps=4, source_video=scene.frames)
        out = sample_video(result.state, req, scene.frames[0])
        # Static controls alone would freeze all masks; the source video
        # moves, so some cells must be fresh.
        assert out.initial_noise.masks.masks[1:].sum() > 0


class TestSampleLong:
    def test_frame_count_arithmetic(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(82, frames=10, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=4, iterations=3, frames_per_iteration=4,
                            ddim_steps=4)
        out = sample_long(result.state, req)
        assert out.frames.shape[0] == req.total_frames() == 10

    def test_single_iteration_equals_composition(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(83, frames=4, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=5, iterations=1, frames_per_iteration=4,
                            ddim_steps=4)
        long_out = sample_long(result.state, req)
        first = sample_first_frame(result.state, req)
        clip = sample_video(result.state,
                            replace(req, seed=derive_seed(req.seed, "video0")),
                            first.frames[0])
        assert np.array_equal(long_out.frames, clip.frames)

    def test_junction_frames_bit_identical(self, trained_micro):
        result, _ = trained_micro
        scene = generate_scene(random_scene(84, frames=10, height=32, width=32))
        req = SampleRequest(caption=scene.caption, controls=scene.depth_maps,
                            seed=6, iterations=3, frames_per_iteration=4,
                            ddim_steps=4)
        out = sample_long(result.state, req)
        first = sample_first_frame(result.state, req)
        assert np.array_equal(out.frames[0], first.frames[0])
        clip0 = sample_video(result.state,
                             replace(req, controls=scene.depth_maps[0:4],
                                     seed=derive_seed(req.seed, "video0")),
                             first.frames[0])
        clip1 = sample_video(result.state,
                             replace(req, controls=scene.depth_maps[3:7],
                                     seed=derive_seed(req.seed, "video1")),
                             clip0.frames[-1])
        assert np.array_equal(out.frames[3], clip0.frames[-1])
        assert np.array_equal(clip1.frames[0], clip0.frames[-1])
        assert np.array_equal(out.frames[4:7], clip1.frames[1:])

    def test_insufficient_controls_rejected(self, trained_micro):
        result, _ = trained_micro
        req = SampleRequest(caption="a", controls=np.zeros((5, 1, 32, 32)),
                            iterations=3, frames_per_iteration=4)
        with pytest.raises(ValueError, match="control maps"):
            sample_long(result.state, req)
