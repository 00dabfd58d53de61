"""Fusion layer: temporal alignment indices, joint attention invariances,
identity at init for every injection variant, frozen-backbone wiring."""

import pytest
import torch

from avflow.backbone import AUDIO, VIDEO, BackboneConfig, build_backbone
from avflow.fusion import (
    ConcatToTextInjector,
    DirectAlignmentInjector,
    DualTimestepEmbedder,
    FusionBlock,
    FusionConfig,
    LinkedModel,
    SymmetricCrossAttentionBlock,
    TimestepPair,
    placements,
    tau,
    tau_audio_tokens,
    tau_video_tokens,
)
from avflow.rng import make_generator

ETA_A, ETA_V = 24.0, 6.0


def tiny_backbones(n_blocks=2, seed=0, dtype=torch.float32):
    a = build_backbone(BackboneConfig(
        n_blocks=n_blocks, hidden=24, heads=2, mlp_hidden=48,
        in_channels=4, modality=AUDIO), seed, dtype=dtype)
    v = build_backbone(BackboneConfig(
        n_blocks=n_blocks, hidden=24, heads=2, mlp_hidden=48,
        in_channels=4, modality=VIDEO), seed, dtype=dtype)
    return a, v


def jitter(module, seed, scale=0.05):
    g = make_generator(seed, "jitter")
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


class TestPlacements:
    def test_interleaved_even_coverage(self):
        cfg = FusionConfig(n_fusion=3)
        assert placements(cfg, 6) == [2, 4, 6]
        assert placements(FusionConfig(n_fusion=2), 4) == [2, 4]
        assert placements(FusionConfig(n_fusion=1), 5) == [5]

    def test_interleaved_too_many_blocks(self):
        with pytest.raises(ValueError):
            placements(FusionConfig(n_fusion=5), 3)

    def test_after_block(self):
        cfg = FusionConfig(n_fusion=3, arrangement="after_block:2")
        assert placements(cfg, 6) == [2, 2, 2]
        with pytest.raises(ValueError):
            placements(FusionConfig(arrangement="after_block:9"), 6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(injection="nonsense")
        with pytest.raises(ValueError):
            FusionConfig(direction="sideways")
        with pytest.raises(ValueError):
            FusionConfig(t_cond=1.5)
        with pytest.raises(ValueError):
            FusionConfig(arrangement="randomly")
        with pytest.raises(ValueError):
            FusionConfig(common_dim=10, heads=4)


class TestTau:
    def test_video_identity(self):
        for n in range(10):
            assert tau(n, VIDEO, ETA_A, ETA_V) == float(n)

    def test_audio_rescaled(self):
        # 4 audio tokens per video frame at 24 vs 6 tokens/s
        assert tau(4, AUDIO, ETA_A, ETA_V) == pytest.approx(1.0)
        assert tau(6, AUDIO, ETA_A, ETA_V) == pytest.approx(1.5)

    def test_aligned_media_times_agree(self):
        # every frame boundary of a 5.16 s clip: audio token 4k and frame k
        # describe the same instant and must share a temporal index
        for k in range(31):
            t_audio = tau(4 * k, AUDIO, ETA_A, ETA_V)
            t_video = tau(k, VIDEO, ETA_A, ETA_V)
            assert abs(t_audio - t_video) <= 1e-9

    def test_validation(self):
        with pytest.raises(ValueError):
            tau(-1, AUDIO, ETA_A, ETA_V)
        with pytest.raises(ValueError):
            tau(0, AUDIO, 0.0, ETA_V)
        with pytest.raises(ValueError):
            tau(0, "text", ETA_A, ETA_V)

    def test_audio_token_vector(self):
        v = tau_audio_tokens(8, ETA_A, ETA_V)
        assert torch.allclose(v, 0.25 * torch.arange(8, dtype=torch.float32))

    def test_video_tokens_share_frame_index(self):
        v = tau_video_tokens((3, 2, 2))
        assert v.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]


class TestTimestepPair:
    def test_bounds(self):
        TimestepPair(0.0, 1.0)
        TimestepPair(torch.tensor([0.2, 0.9]), 0.5)
        with pytest.raises(ValueError):
            TimestepPair(1.2, 0.5)
        with pytest.raises(ValueError):
            TimestepPair(0.5, torch.tensor([0.1, -0.1]))


class TestDualTimestepEmbedder:
    def test_order_sensitive(self):
        emb = DualTimestepEmbedder(16)
        a = emb(torch.tensor([0.1]), torch.tensor([0.9]))
        b = emb(torch.tensor([0.9]), torch.tensor([0.1]))
        assert a.shape == (1, 16)
        assert not torch.allclose(a, b)


class TestFusionBlock:
    def make(self, dtype=torch.float64, seed=0):
        torch.manual_seed(0)
        fb = FusionBlock(FusionConfig(common_dim=16, heads=2, mlp_hidden=32),
                         dim_a=24, dim_v=24).to(dtype)
        if seed is not None:
            jitter(fb, seed)
        return fb

    def inputs(self, dtype=torch.float64):
        g = make_generator(1, "fb")
        x_a = torch.randn((2, 8, 24), generator=g, dtype=dtype)
        x_v = torch.randn((2, 12, 24), generator=g, dtype=dtype)  # grid (3,2,2)
        tau_a = tau_audio_tokens(8, ETA_A, ETA_V, dtype=dtype)
        tau_v = tau_video_tokens((3, 2, 2), dtype=dtype)
        return x_a, x_v, TimestepPair(0.3, 0.96), tau_a, tau_v

    def test_identity_at_init(self):
        fb = self.make(seed=None)  # keep the zero-initialized gates
        x_a, x_v, ts, ta, tv = self.inputs()
        a, v = fb(x_a, x_v, ts, ta, tv)
        assert torch.equal(a, x_a)
        assert torch.equal(v, x_v)

    def test_fused_path_matches_explicit(self):
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        a1, v1 = fb(x_a, x_v, ts, ta, tv)
        a2, v2, _ = fb(x_a, x_v, ts, ta, tv, return_probs=True)
        assert (a1 - a2).abs().max().item() <= 1e-12
        assert (v1 - v2).abs().max().item() <= 1e-12

    def test_logit_shift_invariance(self):
        # shifting both modalities' temporal indices by the same offset leaves
        # the joint attention logits unchanged (relative rotary positions)
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        l0, _, _ = fb.joint_logits(x_a, x_v, ts, ta, tv)
        l1, _, _ = fb.joint_logits(x_a, x_v, ts, ta + 7.0, tv + 7.0)
        assert (l0 - l1).abs().max().item() <= 1e-6

    def test_probs_normalized_over_joint_axis(self):
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        _, _, probs = fb(x_a, x_v, ts, ta, tv, return_probs=True)
        assert probs.shape == (2, 2, 20, 20)
        assert torch.allclose(probs.sum(-1), torch.ones(2, 2, 20, dtype=probs.dtype))

    def test_mask_modality_removes_columns(self):
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        _, _, probs = fb(x_a, x_v, ts, ta, tv, mask_modality=VIDEO,
                         return_probs=True)
        assert probs[:, :, :, 8:].abs().max().item() == 0.0
        assert torch.allclose(probs.sum(-1), torch.ones(2, 2, 20, dtype=probs.dtype))

    def test_masked_audio_rows_are_pure_self_attention(self):
        # with video columns masked, audio queries see a single-modality
        # softmax; verify against a from-scratch computation
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        logits, _, _ = fb.joint_logits(x_a, x_v, ts, ta, tv)
        _, _, probs = fb(x_a, x_v, ts, ta, tv, mask_modality=VIDEO,
                         return_probs=True)
        expected = torch.softmax(logits[:, :, :8, :8], dim=-1)
        assert torch.allclose(probs[:, :, :8, :8], expected, atol=1e-12)

    def test_non_finite_raises(self):
        fb = self.make()
        x_a, x_v, ts, ta, tv = self.inputs()
        with pytest.raises((RuntimeError, ValueError)):
            fb(torch.full_like(x_a, float("nan")), x_v, ts, ta, tv)

    def test_odd_fusion_head_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            FusionBlock(FusionConfig(common_dim=6, heads=2), 8, 8)


class TestSymmetricCrossAttention:
    def test_identity_at_init(self):
        torch.manual_seed(0)
        blk = SymmetricCrossAttentionBlock(
            FusionConfig(common_dim=16, heads=2, mlp_hidden=32), 24, 24
        ).to(torch.float64)
        g = make_generator(2, "sym")
        x_a = torch.randn((1, 8, 24), generator=g, dtype=torch.float64)
        x_v = torch.randn((1, 12, 24), generator=g, dtype=torch.float64)
        a, v = blk(x_a, x_v, TimestepPair(0.2, 0.9),
                   tau_audio_tokens(8, ETA_A, ETA_V, dtype=torch.float64),
                   tau_video_tokens((3, 2, 2), dtype=torch.float64))
        assert torch.equal(a, x_a)
        assert torch.equal(v, x_v)


class TestDirectAlignment:
    def test_pool_temporal(self):
        x = torch.arange(24, dtype=torch.float32).reshape(1, 12, 2)
        pooled = DirectAlignmentInjector.pool_temporal(x, (3, 2, 2))
        assert pooled.shape == (1, 3, 2)
        # frame 0 covers tokens 0..3: mean of rows 0..3
        assert torch.allclose(pooled[0, 0], x[0, :4].mean(0))

    def test_pool_identity_for_1d(self):
        x = torch.randn(1, 5, 3)
        assert torch.equal(DirectAlignmentInjector.pool_temporal(x, None), x)

    def test_align_indices_audio_from_video(self):
        # 8 audio tokens at 24/s against 31 frames at 6/s: token n -> frame round(n/4)
        idx = DirectAlignmentInjector.align_indices(8, ETA_A, ETA_V, 31)
        assert idx.tolist() == [0, 0, 0, 1, 1, 1, 2, 2]

    def test_align_indices_clamped(self):
        idx = DirectAlignmentInjector.align_indices(10, ETA_V, ETA_A, 4)
        assert idx.max().item() == 3

    def test_identity_at_zero_init(self):
        inj = DirectAlignmentInjector(24, 16)
        h_gen = torch.randn(2, 8, 16)
        h_cond = torch.randn(2, 12, 24)
        out = inj(h_gen, h_cond, None, (3, 2, 2), ETA_A, ETA_V)
        assert torch.equal(out, h_gen)

    def test_injects_after_training_signal(self):
        inj = DirectAlignmentInjector(4, 6)
        jitter(inj, 3)
        h_gen = torch.zeros(1, 8, 6)
        h_cond = torch.randn(1, 12, 4)
        out = inj(h_gen, h_cond, None, (3, 2, 2), ETA_A, ETA_V)
        assert out.abs().sum() > 0


class TestConcatToText:
    def test_output_shape(self):
        inj = ConcatToTextInjector(24, 32)
        extra = inj(torch.randn(2, 12, 24), (3, 2, 2))
        assert extra.shape == (2, 3, 32)


class TestLinkedModel:
    GRID = (3, 2, 2)

    def linked(self, injection="fusion_block", arrangement="interleaved",
               n_blocks=2, dtype=torch.float32, **kw):
        bb_a, bb_v = tiny_backbones(n_blocks=n_blocks, dtype=dtype)
        cfg = FusionConfig(n_fusion=2, common_dim=16, heads=2, mlp_hidden=32,
                           injection=injection, arrangement=arrangement, **kw)
        return LinkedModel(bb_a, bb_v, cfg, eta_a=ETA_A, eta_v=ETA_V,
                           video_grid=self.GRID, seed=0)

    def io_tensors(self, dtype=torch.float32):
        g = make_generator(4, "linked")
        x_a = torch.randn((2, 8, 4), generator=g, dtype=dtype)
        x_v = torch.randn((2, 12, 4), generator=g, dtype=dtype)
        return x_a, x_v

    def test_depth_mismatch_rejected(self):
        a = build_backbone(BackboneConfig(n_blocks=2, hidden=24, heads=2,
                                          modality=AUDIO), 0)
        v = build_backbone(BackboneConfig(n_blocks=3, hidden=24, heads=2,
                                          modality=VIDEO), 0)
        with pytest.raises(ValueError, match="depth mismatch"):
            LinkedModel(a, v, FusionConfig(common_dim=16, heads=2),
                        eta_a=ETA_A, eta_v=ETA_V, video_grid=self.GRID)

    def test_backbones_frozen_on_construction(self):
        lm = self.linked()
        assert lm.backbone_a.frozen and lm.backbone_v.frozen
        names = [n for n, _ in lm.fusion_parameters()]
        assert names and not any(n.startswith("backbone_") for n in names)
        assert all(p.requires_grad for _, p in lm.fusion_parameters())

    @pytest.mark.parametrize("injection", ["fusion_block",
                                           "symmetric_cross_attention",
                                           "direct_alignment"])
    @pytest.mark.parametrize("arrangement", ["interleaved", "after_block:1"])
    def test_identity_at_init(self, injection, arrangement):
        # zero-initialized gates/projections: the linked model must reproduce
        # the lone generated-modality backbone exactly
        lm = self.linked(injection=injection, arrangement=arrangement)
        x_a, x_v = self.io_tensors()
        for direction in ("v2a", "a2v"):
            gen_bb = lm.backbone_a if direction == "v2a" else lm.backbone_v
            gen_x = x_a if direction == "v2a" else x_v
            cond_x = x_v if direction == "v2a" else x_a
            ts = TimestepPair(0.3, 0.96)
            t_gen = ts.t_a if direction == "v2a" else ts.t_v
            grid = self.GRID if direction == "a2v" else None
            alone, _ = gen_bb(gen_x, t_gen, grid=grid)
            linked_v = lm.linked_forward(gen_x, cond_x, ts, direction=direction)
            assert (alone - linked_v).abs().max().item() <= 1e-6

    def test_fusion_changes_output_after_jitter(self):
        lm = self.linked()
        for fb in lm.fusion:
            jitter(fb, 5)
        x_a, x_v = self.io_tensors()
        alone, _ = lm.backbone_a(x_a, 0.3)
        linked_v = lm.linked_forward(x_a, x_v, TimestepPair(0.3, 0.96),
                                     direction="v2a")
        assert not torch.allclose(alone, linked_v)

    def test_no_reinjection_cond_stream_untouched(self):
        # with reinjection disabled, the conditioning features the second
        # fusion block sees must not depend on the first block's output;
        # check by zeroing the generated stream's influence: cond path output
        # equals the plain frozen backbone's trace
        lm = self.linked(injection="no_reinjection")
        for fb in lm.fusion:
            jitter(fb, 6)
        x_a, x_v = self.io_tensors()
        v_with = lm.linked_forward(x_a, x_v, TimestepPair(0.3, 0.96),
                                   direction="v2a")
        # reinjection variant must differ from non-reinjection with same weights
        lm2 = self.linked(injection="fusion_block")
        with torch.no_grad():
            for p2, p in zip(lm2.fusion.parameters(), lm.fusion.parameters()):
                p2.copy_(p)
        v_reinj = lm2.linked_forward(x_a, x_v, TimestepPair(0.3, 0.96),
                                     direction="v2a")
        assert not torch.allclose(v_with, v_reinj)

    def test_concat_to_text_runs_and_differs(self):
        lm = self.linked(injection="concat_to_text")
        x_a, x_v = self.io_tensors()
        v = lm.linked_forward(x_a, x_v, TimestepPair(0.3, 0.96), direction="v2a")
        assert v.shape == x_a.shape

    def test_no_gradient_reaches_frozen_backbones(self):
        lm = self.linked()
        x_a, x_v = self.io_tensors()
        out = lm.linked_forward(x_a, x_v, TimestepPair(0.3, 0.96), direction="v2a")
        out.square().mean().backward()
        for bb in (lm.backbone_a, lm.backbone_v):
            assert all(p.grad is None for p in bb.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for _, p in lm.fusion_parameters())

    def test_batched_timesteps(self):
        lm = self.linked()
        x_a, x_v = self.io_tensors()
        ts = TimestepPair(torch.tensor([0.2, 0.8]), torch.tensor([0.96, 0.96]))
        v = lm.linked_forward(x_a, x_v, ts, direction="v2a")
        assert v.shape == x_a.shape
