"""Fusion blocks linking two frozen backbones: common-dimension projection,
temporally-aligned joint self attention with per-modality parameters,
dual-timestep adaLN-Zero gating, back-projection and feature reinjection,
plus the alternative injection variants used for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import (
    AUDIO,
    VIDEO,
    AdaLNModulation,
    Backbone,
    modulate,
    rope_angles_1d,
    rope_rotate,
)
from .flowmatch import sinusoidal_features
from .rng import derive_seed

INJECTIONS = (
    "fusion_block",
    "concat_to_text",
    "direct_alignment",
    "symmetric_cross_attention",
    "no_reinjection",
)


@dataclass
class TimestepPair:
    """Flow times of the two modalities; each may be a scalar or a [B] tensor."""

    t_a: object
    t_v: object

    def __post_init__(self):
        for name, t in (("t_a", self.t_a), ("t_v", self.t_v)):
            vals = t if isinstance(t, Tensor) else torch.tensor(float(t))
            if ((vals < 0) | (vals > 1)).any():
                raise ValueError(f"{name} must lie in [0,1]")


@dataclass
class FusionConfig:
    n_fusion: int = 3
    common_dim: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    arrangement: str = "interleaved"  # or "after_block:<k>"
    injection: str = "fusion_block"
    direction: str = "v2a"  # which modality is generated by default
    shared_params_across_tasks: bool = False
    t_cond: float = 0.96
    rope_theta_base: float = 10000.0

    def __post_init__(self):
        if not 0.0 <= self.t_cond <= 1.0:
            raise ValueError(f"t_cond must lie in [0,1], got {self.t_cond}")
        if self.injection not in INJECTIONS:
            raise ValueError(
                f"unknown injection {self.injection!r}; expected one of {INJECTIONS}"
            )
        if self.direction not in ("v2a", "a2v"):
            raise ValueError(f"direction must be 'v2a' or 'a2v', got {self.direction!r}")
        if self.common_dim % self.heads != 0:
            raise ValueError("common_dim must be divisible by heads")
        if not (self.arrangement == "interleaved"
                or self.arrangement.startswith("after_block:")):
            raise ValueError(f"bad arrangement {self.arrangement!r}")


def placements(cfg: FusionConfig, depth: int) -> list[int]:
    """1-based block index after which each fusion block is applied.

    Interleaved placements are strictly increasing and cover the depth evenly
    (e.g. depth 6 with 3 blocks -> after blocks 2, 4, 6).
    """
    if cfg.arrangement == "interleaved":
        pos = [round(depth * (k + 1) / cfg.n_fusion) for k in range(cfg.n_fusion)]
        if len(set(pos)) != len(pos) or any(p < 1 or p > depth for p in pos):
            raise ValueError(
                f"cannot interleave {cfg.n_fusion} fusion blocks over depth {depth}"
            )
        return pos
    k = int(cfg.arrangement.split(":", 1)[1])
    if not 1 <= k <= depth:
        raise ValueError(f"after_block index {k} out of range for depth {depth}")
    return [k] * cfg.n_fusion


def tau(n: int, modality: str, eta_a: float, eta_v: float) -> float:
    """Temporal-alignment index: video temporal positions map to themselves,
    audio positions are rescaled so tokens at the same media time get the same
    value."""
    if eta_a <= 0 or eta_v <= 0:
        raise ValueError("token rates must be positive")
    if n < 0:
        raise ValueError(f"temporal index must be >= 0, got {n}")
    if modality == VIDEO:
        return float(n)
    if modality == AUDIO:
        return n * eta_v / eta_a
    raise ValueError(f"unknown modality {modality!r}")


def tau_audio_tokens(n_tokens: int, eta_a: float, eta_v: float,
                     dtype=torch.float32) -> Tensor:
    return torch.arange(n_tokens, dtype=dtype) * (eta_v / eta_a)


def tau_video_tokens(grid: tuple[int, int, int], dtype=torch.float32) -> Tensor:
    """All spatial tokens of a frame share that frame's temporal index."""
    f, hp, wp = grid
    return torch.arange(f, dtype=dtype).repeat_interleave(hp * wp)


class DualTimestepEmbedder(nn.Module):
    """Separate sinusoidal features for t_a and t_v, concatenated, one MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(2 * freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim)
        )

    def forward(self, t_a: Tensor, t_v: Tensor) -> Tensor:
        p = next(self.parameters())
        fa = sinusoidal_features(t_a.to(p.dtype), self.freq_dim)
        fv = sinusoidal_features(t_v.to(p.dtype), self.freq_dim)
        return self.mlp(torch.cat([fa, fv], dim=-1))


class _ModalityStream(nn.Module):
    """Per-modality parameters of one fusion block: modulation, projection
    into the common width, attention projections, and the back-projecting MLP."""

    def __init__(self, dim: int, common: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.mod = AdaLNModulation(common, dim)
        self.proj_in = nn.Linear(dim, common)
        self.q = nn.Linear(common, common)
        self.k = nn.Linear(common, common)
        self.v = nn.Linear(common, common)
        self.out = nn.Linear(common, common)
        head_dim = common // heads
        self.qk_scale = nn.Parameter(torch.full((heads,), math.sqrt(head_dim)))
        self.mlp = nn.Sequential(
            nn.Linear(common, mlp_hidden), nn.SiLU(), nn.Linear(mlp_hidden, dim)
        )


class FusionBlock(nn.Module):
    """Joint self attention over concatenated audio and video tokens with
    temporally-aligned rotary angles, separate parameter sets per modality,
    and zero-initialized gates so the block is an identity at init."""

    def __init__(self, cfg: FusionConfig, dim_a: int, dim_v: int, index: int = 0):
        super().__init__()
        self.cfg = cfg
        self.index = index
        self.heads = cfg.heads
        self.head_dim = cfg.common_dim // cfg.heads
        if self.head_dim % 2 != 0:
            raise ValueError("fusion head dim must be even for rotary pairs")
        self.t_embed = DualTimestepEmbedder(cfg.common_dim)
        self.stream_a = _ModalityStream(dim_a, cfg.common_dim, cfg.heads, cfg.mlp_hidden)
        self.stream_v = _ModalityStream(dim_v, cfg.common_dim, cfg.heads, cfg.mlp_hidden)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)

    def _qkv(self, stream: _ModalityStream, z: Tensor, angles: Tensor):
        q = torch.nn.functional.normalize(self._split(stream.q(z)), dim=-1)
        k = torch.nn.functional.normalize(self._split(stream.k(z)), dim=-1)
        q = q * stream.qk_scale.to(q.dtype)[None, :, None, None]
        q = rope_rotate(q, angles)
        k = rope_rotate(k, angles)
        v = self._split(stream.v(z))
        return q, k, v

    def joint_logits(self, x_a: Tensor, x_v: Tensor, ts: TimestepPair,
                     tau_a: Tensor, tau_v: Tensor):
        """Pre-softmax logits over the concatenated token axis (audio first)."""
        cond = self._cond(ts, x_a)
        z_a = self._project(self.stream_a, x_a, cond)
        z_v = self._project(self.stream_v, x_v, cond)
        ang_a = rope_angles_1d(tau_a.to(x_a.dtype), self.cfg.rope_theta_base, self.head_dim)
        ang_v = rope_angles_1d(tau_v.to(x_v.dtype), self.cfg.rope_theta_base, self.head_dim)
        qa, ka, va = self._qkv(self.stream_a, z_a, ang_a)
        qv, kv, vv = self._qkv(self.stream_v, z_v, ang_v)
        q = torch.cat([qa, qv], dim=2)
        k = torch.cat([ka, kv], dim=2)
        v = torch.cat([va, vv], dim=2)
        return torch.einsum("bhqd,bhkd->bhqk", q, k), v, cond

    def _cond(self, ts: TimestepPair, ref: Tensor) -> Tensor:
        b = ref.shape[0]

        def as_batch(t):
            if isinstance(t, Tensor):
                return t.expand(b) if t.dim() == 0 else t
            return torch.full((b,), float(t), dtype=ref.dtype)

        return self.t_embed(as_batch(ts.t_a), as_batch(ts.t_v))

    def _project(self, stream: _ModalityStream, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale, _ = stream.mod(cond)
        return stream.proj_in(modulate(stream.norm(x), shift, scale))

    def forward(self, x_a: Tensor, x_v: Tensor, ts: TimestepPair,
                tau_a: Tensor, tau_v: Tensor,
                mask_modality: Optional[str] = None,
                return_probs: bool = False):
        """Returns refined (x_hat_a, x_hat_v); both are gated residuals.

        mask_modality removes one modality's columns from the attention
        (diagnostic use only: it isolates the other modality's self-attention
        path).
        """
        ta_len = x_a.shape[1]
        if mask_modality is None and not return_probs:
            # fused path; same math as softmax(joint_logits) @ v
            cond = self._cond(ts, x_a)
            z_a = self._project(self.stream_a, x_a, cond)
            z_v = self._project(self.stream_v, x_v, cond)
            ang_a = rope_angles_1d(tau_a.to(x_a.dtype), self.cfg.rope_theta_base,
                                   self.head_dim)
            ang_v = rope_angles_1d(tau_v.to(x_v.dtype), self.cfg.rope_theta_base,
                                   self.head_dim)
            qa, ka, va = self._qkv(self.stream_a, z_a, ang_a)
            qv, kv, vv = self._qkv(self.stream_v, z_v, ang_v)
            q = torch.cat([qa, qv], dim=2)
            k = torch.cat([ka, kv], dim=2)
            v = torch.cat([va, vv], dim=2)
            o = torch.nn.functional.scaled_dot_product_attention(q, k, v, scale=1.0)
            probs = None
        else:
            logits, v, cond = self.joint_logits(x_a, x_v, ts, tau_a, tau_v)
            if mask_modality is not None:
                cols = slice(0, ta_len) if mask_modality == AUDIO else slice(ta_len, None)
                logits = logits.clone()
                logits[:, :, :, cols] = float("-inf")
            probs = torch.softmax(logits, dim=-1)
            o = torch.einsum("bhqk,bhkd->bhqd", probs, v)
        b = o.shape[0]
        o = o.transpose(1, 2).reshape(b, -1, self.heads * self.head_dim)
        o_a, o_v = o[:, :ta_len], o[:, ta_len:]
        out = []
        for stream, x, oo in ((self.stream_a, x_a, o_a), (self.stream_v, x_v, o_v)):
            _, _, gate = stream.mod(cond)
            out.append(x + gate * stream.mlp(stream.out(oo)))
        x_hat_a, x_hat_v = out
        if not (torch.isfinite(x_hat_a).all() and torch.isfinite(x_hat_v).all()):
            raise RuntimeError(f"non-finite activations in fusion block {self.index}")
        if return_probs:
            return x_hat_a, x_hat_v, probs
        return x_hat_a, x_hat_v


class SymmetricCrossAttentionBlock(nn.Module):
    """Ablation variant: two cross-attention paths (audio queries video and
    vice versa) instead of one joint self attention; gating as in FusionBlock."""

    def __init__(self, cfg: FusionConfig, dim_a: int, dim_v: int, index: int = 0):
        super().__init__()
        self.cfg = cfg
        self.index = index
        self.heads = cfg.heads
        self.head_dim = cfg.common_dim // cfg.heads
        self.t_embed = DualTimestepEmbedder(cfg.common_dim)
        self.stream_a = _ModalityStream(dim_a, cfg.common_dim, cfg.heads, cfg.mlp_hidden)
        self.stream_v = _ModalityStream(dim_v, cfg.common_dim, cfg.heads, cfg.mlp_hidden)

    def forward(self, x_a: Tensor, x_v: Tensor, ts: TimestepPair,
                tau_a: Tensor, tau_v: Tensor):
        helper = FusionBlock._cond.__get__(self)
        cond = helper(ts, x_a)
        proj = FusionBlock._project.__get__(self)
        z_a = proj(self.stream_a, x_a, cond)
        z_v = proj(self.stream_v, x_v, cond)
        ang_a = rope_angles_1d(tau_a.to(x_a.dtype), self.cfg.rope_theta_base, self.head_dim)
        ang_v = rope_angles_1d(tau_v.to(x_v.dtype), self.cfg.rope_theta_base, self.head_dim)
        split = FusionBlock._split.__get__(self)

        def cross(q_stream, z_q, ang_q, k_stream, z_k, ang_k):
            q = torch.nn.functional.normalize(split(q_stream.q(z_q)), dim=-1)
            k = torch.nn.functional.normalize(split(k_stream.k(z_k)), dim=-1)
            q = q * q_stream.qk_scale.to(q.dtype)[None, :, None, None]
            q = rope_rotate(q, ang_q)
            k = rope_rotate(k, ang_k)
            v = split(k_stream.v(z_k))
            probs = torch.softmax(torch.einsum("bhqd,bhkd->bhqk", q, k), dim=-1)
            o = torch.einsum("bhqk,bhkd->bhqd", probs, v)
            b = o.shape[0]
            return o.transpose(1, 2).reshape(b, -1, self.heads * self.head_dim)

        o_a = cross(self.stream_a, z_a, ang_a, self.stream_v, z_v, ang_v)
        o_v = cross(self.stream_v, z_v, ang_v, self.stream_a, z_a, ang_a)
        out = []
        for stream, x, oo in ((self.stream_a, x_a, o_a), (self.stream_v, x_v, o_v)):
            _, _, gate = stream.mod(cond)
            out.append(x + gate * stream.mlp(stream.out(oo)))
        return out[0], out[1]


class DirectAlignmentInjector(nn.Module):
    """Ablation variant: pool conditioning activations per temporal position,
    repeat/interpolate along time to the generated token count, project with a
    zero-initialized linear map and add to the generated stream."""

    def __init__(self, dim_cond: int, dim_gen: int):
        super().__init__()
        self.proj = nn.Linear(dim_cond, dim_gen)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    @staticmethod
    def pool_temporal(x: Tensor, grid: Optional[tuple[int, int, int]]) -> Tensor:
        """Mean over spatial tokens per frame; identity for 1D sequences."""
        if grid is None:
            return x
        b, _, d = x.shape
        f, hp, wp = grid
        return x.reshape(b, f, hp * wp, d).mean(dim=2)

    @staticmethod
    def align_indices(n_gen_temporal: int, eta_gen: float, eta_cond: float,
                      n_cond_temporal: int) -> Tensor:
        """Nearest conditioning temporal position for each generated position."""
        pos = torch.arange(n_gen_temporal, dtype=torch.float64) * (eta_cond / eta_gen)
        return pos.round().long().clamp(0, n_cond_temporal - 1)

    def forward(self, h_gen: Tensor, h_cond: Tensor,
                gen_grid, cond_grid, eta_gen: float, eta_cond: float) -> Tensor:
        pooled = self.pool_temporal(h_cond, cond_grid)
        n_gen_temporal = gen_grid[0] if gen_grid is not None else h_gen.shape[1]
        idx = self.align_indices(n_gen_temporal, eta_gen, eta_cond, pooled.shape[1])
        aligned = pooled[:, idx]
        if gen_grid is not None:
            f, hp, wp = gen_grid
            aligned = aligned.repeat_interleave(hp * wp, dim=1)
        return h_gen + self.proj(aligned)


class ConcatToTextInjector(nn.Module):
    """Ablation variant: pooled conditioning features become extra text tokens
    for the generated backbone (static feature extractor; no reinjection)."""

    def __init__(self, dim_cond: int, text_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim_cond, text_dim)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h_cond: Tensor, cond_grid) -> Tensor:
        pooled = DirectAlignmentInjector.pool_temporal(h_cond, cond_grid)
        return self.proj(pooled)


class LinkedModel(nn.Module):
    """Two frozen backbones plus an ordered set of fusion modules.

    The backbones must have equal depth. Media geometry (token rates and the
    video grid) is fixed at construction; fusion parameters are the only
    trainable state.
    """

    def __init__(self, backbone_a: Backbone, backbone_v: Backbone,
                 cfg: FusionConfig, eta_a: float, eta_v: float,
                 video_grid: tuple[int, int, int], seed: int = 0):
        super().__init__()
        if backbone_a.cfg.n_blocks != backbone_v.cfg.n_blocks:
            raise ValueError(
                "backbone depth mismatch: "
                f"{backbone_a.cfg.n_blocks} vs {backbone_v.cfg.n_blocks}"
            )
        self.cfg = cfg
        self.eta_a = eta_a
        self.eta_v = eta_v
        self.video_grid = tuple(video_grid)
        self.backbone_a = backbone_a.freeze()
        self.backbone_v = backbone_v.freeze()
        self.placement = placements(cfg, backbone_a.cfg.n_blocks)

        dim_a, dim_v = backbone_a.cfg.hidden, backbone_v.cfg.hidden
        state = torch.get_rng_state()
        try:
            torch.manual_seed(derive_seed(seed, "init:fusion"))
            if cfg.injection in ("fusion_block", "no_reinjection"):
                self.fusion = nn.ModuleList(
                    FusionBlock(cfg, dim_a, dim_v, i) for i in range(cfg.n_fusion)
                )
            elif cfg.injection == "symmetric_cross_attention":
                self.fusion = nn.ModuleList(
                    SymmetricCrossAttentionBlock(cfg, dim_a, dim_v, i)
                    for i in range(cfg.n_fusion)
                )
            elif cfg.injection == "direct_alignment":
                self.da_v2a = nn.ModuleList(
                    DirectAlignmentInjector(dim_v, dim_a) for _ in range(cfg.n_fusion)
                )
                self.da_a2v = nn.ModuleList(
                    DirectAlignmentInjector(dim_a, dim_v) for _ in range(cfg.n_fusion)
                )
            elif cfg.injection == "concat_to_text":
                self.ct_v2a = ConcatToTextInjector(dim_v, backbone_a.cfg.text_dim)
                self.ct_a2v = ConcatToTextInjector(dim_a, backbone_v.cfg.text_dim)
            self._to_match_dtype(backbone_a)
        finally:
            torch.set_rng_state(state)

    def _to_match_dtype(self, ref: Backbone):
        dtype = next(ref.parameters()).dtype
        for name, module in self.named_children():
            if name not in ("backbone_a", "backbone_v"):
                module.to(dtype)

    # ------------------------------------------------------------------

    def fusion_parameters(self):
        """Trainable parameters: everything except the frozen backbones."""
        for name, p in self.named_parameters():
            if not (name.startswith("backbone_a.") or name.startswith("backbone_v.")):
                yield name, p

    def _resolve(self, direction: Optional[str]):
        direction = direction or self.cfg.direction
        if direction == "v2a":
            return direction, self.backbone_a, self.backbone_v
        return direction, self.backbone_v, self.backbone_a

    def _taus(self, n_audio_tokens: int, dtype):
        tau_a = tau_audio_tokens(n_audio_tokens, self.eta_a, self.eta_v, dtype=dtype)
        tau_v = tau_video_tokens(self.video_grid, dtype=dtype)
        return tau_a, tau_v

    def linked_forward(self, noised_gen: Tensor, noised_cond: Tensor,
                       ts: TimestepPair,
                       texts: tuple[Optional[Tensor], Optional[Tensor]] = (None, None),
                       direction: Optional[str] = None) -> Tensor:
        """Run both backbones block-by-block in lockstep with fusion applied at
        the placement points; returns the generated modality's velocity.

        ts carries (t_a, t_v) regardless of direction; texts is
        (generated-modality text ids, conditioning-modality text ids).
        """
        direction, gen_bb, cond_bb = self._resolve(direction)
        text_g, text_c = texts
        t_gen = ts.t_a if direction == "v2a" else ts.t_v
        t_cond = ts.t_v if direction == "v2a" else ts.t_a
        gen_grid = self.video_grid if direction == "a2v" else None
        cond_grid = self.video_grid if direction == "v2a" else None

        if self.cfg.injection == "concat_to_text":
            return self._concat_to_text_forward(
                direction, gen_bb, cond_bb, noised_gen, noised_cond,
                t_gen, t_cond, text_g, text_c, gen_grid, cond_grid)

        h_g, cvec_g, temb_g, ang_g = gen_bb.embed(noised_gen, t_gen, text_g, grid=gen_grid)
        h_c, cvec_c, temb_c, ang_c = cond_bb.embed(noised_cond, t_cond, text_c, grid=cond_grid)

        n_audio = noised_gen.shape[1] if direction == "v2a" else noised_cond.shape[1]
        tau_a, tau_v = self._taus(n_audio, noised_gen.dtype)

        fb_at = {}
        for fb_idx, pos in enumerate(self.placement):
            fb_at.setdefault(pos, []).append(fb_idx)

        depth = gen_bb.cfg.n_blocks
        for i in range(depth):
            h_g = gen_bb.block_forward(i, h_g, cvec_g, temb_g, ang_g)
            h_c = cond_bb.block_forward(i, h_c, cvec_c, temb_c, ang_c)
            for fb_idx in fb_at.get(i + 1, ()):
                h_g, h_c = self._apply_fusion(
                    fb_idx, direction, h_g, h_c, t_gen, t_cond,
                    tau_a, tau_v, gen_grid, cond_grid)

        v_gen = gen_bb.head_out(h_g, cvec_g)
        cond_bb.head_out(h_c, cvec_c)  # computed, discarded: keeps the graph symmetric
        return v_gen

    def _apply_fusion(self, fb_idx, direction, h_g, h_c, t_gen, t_cond,
                      tau_a, tau_v, gen_grid, cond_grid):
        inj = self.cfg.injection
        if inj == "direct_alignment":
            inj_mod = (self.da_v2a if direction == "v2a" else self.da_a2v)[fb_idx]
            eta_gen = self.eta_a if direction == "v2a" else self.eta_v
            eta_cond = self.eta_v if direction == "v2a" else self.eta_a
            h_g = inj_mod(h_g, h_c, gen_grid, cond_grid, eta_gen, eta_cond)
            return h_g, h_c
        fb = self.fusion[fb_idx]
        if direction == "v2a":
            ts = TimestepPair(t_a=t_gen, t_v=t_cond)
            x_hat_a, x_hat_v = fb(h_g, h_c, ts, tau_a, tau_v)
            new_g, new_c = x_hat_a, x_hat_v
        else:
            ts = TimestepPair(t_a=t_cond, t_v=t_gen)
            x_hat_a, x_hat_v = fb(h_c, h_g, ts, tau_a, tau_v)
            new_g, new_c = x_hat_v, x_hat_a
        if inj == "no_reinjection":
            return new_g, h_c  # conditioning stream untouched: static extractor mode
        return new_g, new_c

    def _concat_to_text_forward(self, direction, gen_bb, cond_bb,
                                noised_gen, noised_cond, t_gen, t_cond,
                                text_g, text_c, gen_grid, cond_grid):
        # Run the conditioning backbone once as a static feature extractor.
        h_c, cvec_c, temb_c, ang_c = cond_bb.embed(noised_cond, t_cond, text_c,
                                                   grid=cond_grid)
        for i in range(cond_bb.cfg.n_blocks):
            h_c = cond_bb.block_forward(i, h_c, cvec_c, temb_c, ang_c)
        injector = self.ct_v2a if direction == "v2a" else self.ct_a2v
        extra_text = injector(h_c, cond_grid)

        h_g, cvec_g, temb_g, ang_g = gen_bb.embed(noised_gen, t_gen, text_g,
                                                  grid=gen_grid)
        temb_g = (extra_text if temb_g is None
                  else torch.cat([temb_g, extra_text], dim=1))
        for i in range(gen_bb.cfg.n_blocks):
            h_g = gen_bb.block_forward(i, h_g, cvec_g, temb_g, ang_g)
        return gen_bb.head_out(h_g, cvec_g)
