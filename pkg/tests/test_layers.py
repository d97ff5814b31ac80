import math

import numpy as np
import pytest
import torch

from ctrlvid.layers import (CrossAttention, ResBlock,
                            SpatialTemporalSelfAttention, TemporalAttention,
                            TemporalConv, st_attention, timestep_embedding)


def central_difference_grads(loss_fn, params, eps=1e-6):
    """Finite-difference oracle for d loss / d params, one entry at a time."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def assert_gradcheck(module, run, params=None, rtol=1e-4):
    """Compare autograd gradients of sum(run()**2) with central differences."""
    module.double()
    params = params if params is not None else [p for p in module.parameters()
                                                if p.numel() <= 64]
    assert params, "gradcheck needs at least one small parameter tensor"
    loss_fn = lambda: run().pow(2).sum()
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    numeric = central_difference_grads(loss_fn, params)
    for p, num in zip(params, numeric):
        denom = num.abs().max().clamp(min=1e-8)
        rel = (p.grad - num).abs().max() / denom
        assert rel < rtol, f"gradient mismatch: rel err {rel:.2e}"


class TestStAttentionFunction:
    def test_single_frame_equals_plain_attention(self):
        torch.manual_seed(0)
        tokens = torch.randn(1, 5, 4)
        w = [torch.randn(4, 4) for _ in range(3)]
        out = st_attention(tokens, *w)
        q = tokens[0] @ w[0].T
        k = tokens[0] @ w[1].T
        v = tokens[0] @ w[2].T
        ref = (q @ k.T / 2.0).softmax(-1) @ v
        assert torch.allclose(out[0], ref, atol=1e-6)

    def test_identical_frames_match_single_frame_output(self):
        torch.manual_seed(1)
        frame = torch.randn(1, 6, 4)
        stacked = frame.expand(5, 6, 4)
        w = [torch.randn(4, 4) for _ in range(3)]
        single = st_attention(frame, *w)
        multi = st_attention(stacked, *w)
        for f in range(5):
            assert torch.allclose(multi[f], single[0], atol=1e-6)

    def test_two_frame_scalar_oracle(self):
        # Direct evaluation with identity weights, F=2, L=1, d=1:
        # softmax([1*1, 1*3]) . [1, 3] = (e^1 + 3 e^3) / (e^1 + e^3).
        tokens = torch.tensor([[[1.0]], [[3.0]]], dtype=torch.float64)
        eye = torch.eye(1, dtype=torch.float64)
        out = st_attention(tokens, eye, eye, eye)
        expected = (math.e ** 1 * 1 + math.e ** 3 * 3) / (math.e ** 1 + math.e ** 3)
        assert out[0, 0, 0].item() == pytest.approx(expected, abs=1e-12)
        assert out[0, 0, 0].item() == pytest.approx(2.7616, abs=5e-5)

    def test_rows_stochastic(self):
        torch.manual_seed(2)
        tokens = torch.randn(3, 4, 8)
        w = [torch.randn(8, 8) for _ in range(3)]
        _, weights = st_attention(tokens, *w, return_weights=True)
        assert weights.shape == (3, 4, 12)
        assert torch.allclose(weights.sum(-1), torch.ones(3, 4), atol=1e-6)


class TestStAttentionModule:
    def test_residual_noop_at_init(self):
        torch.manual_seed(0)
        attn = SpatialTemporalSelfAttention(8)
        h = torch.randn(2, 3, 8, 4, 4)
        assert torch.equal(attn(h), h)

    def test_matches_core_function_when_proj_identity(self):
        torch.manual_seed(3)
        attn = SpatialTemporalSelfAttention(6)
        with torch.no_grad():
            attn.proj.weight.copy_(torch.eye(6))
            attn.proj.bias.zero_()
        h = torch.randn(1, 2, 6, 2, 2)
        normed = attn.norm(h.reshape(2, 6, 2, 2)).reshape(1, 2, 6, 2, 2)
        tokens = normed[0].flatten(2).transpose(1, 2)  # [F, L, C]
        core = st_attention(tokens, attn.wq.weight, attn.wk.weight, attn.wv.weight)
        expected = h + core.transpose(1, 2).reshape(1, 2, 6, 2, 2)
        assert torch.allclose(attn(h), expected, atol=1e-5)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(4)
        attn = SpatialTemporalSelfAttention(4)
        with torch.no_grad():  # move the zero proj off its saddle
            attn.proj.weight.normal_(0, 0.3)
        h = torch.randn(1, 2, 4, 2, 2, dtype=torch.float64)
        assert_gradcheck(attn, lambda: attn(h),
                         params=[attn.wq.weight, attn.proj.weight])


class TestTemporalConv:
    def test_identity_at_init_bit_exact(self):
        conv = TemporalConv(8)
        h = torch.randn(2, 5, 8, 3, 3)
        assert torch.equal(conv(h), h)

    def test_single_frame_identity(self):
        conv = TemporalConv(4)
        h = torch.randn(1, 1, 4, 2, 2)
        assert torch.equal(conv(h), h)

    def test_shift_kernel_oracle(self):
        # Kernel [0, 0, 1] advances every frame by one; the last frame sees
        # zero padding.  Oracle: direct convolution by hand.
        conv = TemporalConv(3)
        conv.set_kernel((0.0, 0.0, 1.0))
        h = torch.randn(1, 4, 3, 2, 2)
        out = conv(h)
        assert torch.allclose(out[0, :3], h[0, 1:], atol=1e-6)
        assert torch.equal(out[0, 3], torch.zeros(3, 2, 2))

    def test_disabled_flag_passthrough(self):
        conv = TemporalConv(4)
        with torch.no_grad():
            conv.conv.weight.normal_()
        h = torch.randn(1, 3, 4, 2, 2)
        assert torch.equal(conv(h, temporal=False), h)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        conv = TemporalConv(2)
        h = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64)
        assert_gradcheck(conv, lambda: conv(h),
                         params=[conv.conv.weight, conv.conv.bias])


class TestTemporalAttention:
    def test_identity_at_init(self):
        torch.manual_seed(0)
        attn = TemporalAttention(8)
        h = torch.randn(2, 4, 8, 3, 3)
        assert torch.equal(attn(h), h)

    def test_single_frame_identity(self):
        torch.manual_seed(0)
        attn = TemporalAttention(8)
        h = torch.randn(2, 1, 8, 3, 3)
        assert torch.equal(attn(h), h)

    def test_uniform_attention_adds_frame_mean(self):
        # Closed form: zero queries uniformize the softmax; identity value
        # and output projections turn the block into h + mean over frames.
        torch.manual_seed(1)
        attn = TemporalAttention(4)
        attn.norm = torch.nn.Identity()
        with torch.no_grad():
            attn.wq.weight.zero_()
            attn.wv.weight.copy_(torch.eye(4))
            attn.proj.weight.copy_(torch.eye(4))
            attn.proj.bias.zero_()
        h = torch.randn(1, 5, 4, 2, 2)
        expected = h + h.mean(dim=1, keepdim=True)
        assert torch.allclose(attn(h), expected, atol=1e-6)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(6)
        attn = TemporalAttention(3)
        with torch.no_grad():
            attn.proj.weight.normal_(0, 0.3)
        h = torch.randn(1, 3, 3, 2, 2, dtype=torch.float64)
        assert_gradcheck(attn, lambda: attn(h),
                         params=[attn.wk.weight, attn.proj.weight])


class TestCrossAttention:
    def test_residual_noop_at_init(self):
        torch.manual_seed(0)
        attn = CrossAttention(8, 16)
        h = torch.randn(2, 3, 8, 4, 4)
        ctx = torch.randn(2, 5, 16)
        assert torch.equal(attn(h, ctx), h)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(7)
        attn = CrossAttention(3, 4)
        with torch.no_grad():
            attn.proj.weight.normal_(0, 0.3)
        h = torch.randn(1, 2, 3, 2, 2, dtype=torch.float64)
        ctx = torch.randn(1, 3, 4, dtype=torch.float64)
        assert_gradcheck(attn, lambda: attn(h, ctx),
                         params=[attn.wk.weight, attn.proj.weight])


class TestTimestepEmbedding:
    def test_shape_and_determinism(self):
        t = torch.tensor([1, 500, 1000])
        emb = timestep_embedding(t, 32)
        assert emb.shape == (3, 32)
        assert torch.equal(emb, timestep_embedding(t, 32))
        assert not torch.equal(emb[0], emb[1])

    def test_bounded(self):
        emb = timestep_embedding(torch.arange(1, 1001), 64)
        assert emb.abs().max() <= 1.0


class TestResBlock:
    def test_channel_change_and_shape(self):
        torch.manual_seed(0)
        block = ResBlock(8, 16, emb_width=12)
        h = torch.randn(2, 3, 8, 4, 4)
        emb = torch.randn(2, 3, 12)
        assert block(h, emb).shape == (2, 3, 16, 4, 4)

    def test_per_frame_processing(self):
        torch.manual_seed(0)
        block = ResBlock(4, 4, emb_width=8)
        h = torch.randn(1, 4, 4, 3, 3)
        emb = torch.randn(1, 1, 8).expand(1, 4, 8)
        out = block(h, emb)
        perm = [2, 0, 3, 1]
        out_perm = block(h[:, perm], emb)
        assert torch.allclose(out[:, perm], out_perm, atol=1e-6)
