"""Modality-generic diffusion-transformer backbone.

Tokenization (video patchify, audio framing lives in data), rotary position
embeddings (1D for audio, 3D for video), adaLN-conditioned blocks with self
attention, optional text cross attention and an MLP, plus per-block taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .flowmatch import sinusoidal_features
from .rng import derive_seed

AUDIO = "audio"
VIDEO = "video"


@dataclass
class TokenSequence:
    """A timed token sequence for one modality.

    data: [T, D] features. eta: temporal positions per second of media time
    (audio token rate, or video frame rate -- spatial multiplicity is carried
    by `grid`, not by eta). pad: right-padding added during encoding, so a
    decoder can trim.
    """

    data: Tensor
    modality: str
    eta: float
    grid: Optional[tuple[int, int, int]] = None
    pad: int = 0

    def __post_init__(self):
        if self.modality not in (AUDIO, VIDEO):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.data.dim() != 2:
            raise ValueError(f"token data must be [T, D], got {tuple(self.data.shape)}")
        t, d = self.data.shape
        if t < 1 or d < 2 or d % 2 != 0:
            raise ValueError(f"need T >= 1 and even D >= 2, got T={t}, D={d}")
        if self.grid is not None:
            f, h, w = self.grid
            if f * h * w != t:
                raise ValueError(f"grid {self.grid} does not match T={t}")

    @property
    def temporal_positions(self) -> int:
        """Number of distinct temporal positions (frames for video, tokens for audio)."""
        return self.grid[0] if self.grid is not None else self.data.shape[0]


@dataclass
class BackboneConfig:
    n_blocks: int = 6
    hidden: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    patch: int = 2
    rope_theta_base: float = 10000.0
    text_vocab: int = 8
    text_dim: int = 32
    in_channels: int = 4
    modality: str = AUDIO

    def __post_init__(self):
        if self.n_blocks < 1 or self.patch < 1:
            raise ValueError("need n_blocks >= 1 and patch >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ValueError("per-head dim must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


# Full-scale preset retained for documentation parity; never used in tests.
FULL_SCALE = dict(n_blocks=24, hidden=1024, heads=16, mlp_hidden=4096, patch=2)


@dataclass
class ActivationTrace:
    per_block: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def patchify_video(frames: Tensor, patch: int, fps: float) -> TokenSequence:
    """Flatten [F, H, W, C] frames into [F*Hp*Wp, C*patch^2] tokens.

    Token order is frame-major, then row-major, then column-major.
    """
    if frames.dim() != 4:
        raise ValueError(f"frames must be [F,H,W,C], got {tuple(frames.shape)}")
    f, h, w, c = frames.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"H={h}, W={w} not divisible by patch={patch}")
    hp, wp = h // patch, w // patch
    x = frames.reshape(f, hp, patch, wp, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(f * hp * wp, c * patch * patch)
    return TokenSequence(data=x, modality=VIDEO, eta=fps, grid=(f, hp, wp))


def unpatchify_video(tokens: TokenSequence, patch: int, channels: int) -> Tensor:
    """Inverse of patchify_video; bit-exact round trip."""
    if tokens.grid is None:
        raise ValueError("video token sequence is missing its grid")
    f, hp, wp = tokens.grid
    x = tokens.data.reshape(f, hp, wp, patch, patch, channels)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(f, hp * patch, wp * patch, channels)
    return x


# ---------------------------------------------------------------------------
# Rotary embeddings
# ---------------------------------------------------------------------------


def rope_angles_1d(positions: Tensor, theta_base: float, dh: int) -> Tensor:
    """angle(n, k) = position(n) * theta_base^(-2k/dh) for k = 0..dh/2-1."""
    if dh % 2 != 0:
        raise ValueError(f"head dim must be even, got {dh}")
    k = torch.arange(dh // 2, dtype=positions.dtype)
    inv_freq = theta_base ** (-2.0 * k / dh)
    return positions[:, None] * inv_freq[None, :]


def rope_angles_3d(grid: tuple[int, int, int], theta_base: float, dh: int,
                   dtype=torch.float32) -> Tensor:
    """Channel pairs split into three equal groups for (frame, row, column)
    coordinates; each group laddered as in rope_angles_1d."""
    if dh % 2 != 0:
        raise ValueError(f"head dim must be even, got {dh}")
    pairs = dh // 2
    if pairs % 3 != 0:
        need = 3 * math.ceil(pairs / 3) * 2
        raise ValueError(
            f"head dim {dh} gives {pairs} rotary pairs, not divisible by 3; "
            f"pad head dim to {need}"
        )
    f, hp, wp = grid
    coords = torch.stack(
        torch.meshgrid(
            torch.arange(f, dtype=dtype),
            torch.arange(hp, dtype=dtype),
            torch.arange(wp, dtype=dtype),
            indexing="ij",
        ),
        dim=-1,
    ).reshape(-1, 3)  # token index of (f,r,c) = f*Hp*Wp + r*Wp + c
    group = pairs // 3
    parts = [rope_angles_1d(coords[:, axis], theta_base, 2 * group) for axis in range(3)]
    return torch.cat(parts, dim=-1)


def rope_rotate(x: Tensor, angles: Tensor) -> Tensor:
    """Rotate consecutive channel pairs of x [..., T, Dh] by angles [T, Dh/2]."""
    if x.shape[-1] % 2 != 0:
        raise ValueError(f"channel count must be even, got {x.shape[-1]}")
    if angles.shape[-1] * 2 != x.shape[-1] or angles.shape[-2] != x.shape[-2]:
        raise ValueError(
            f"angles {tuple(angles.shape)} incompatible with x {tuple(x.shape)}"
        )
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


# ---------------------------------------------------------------------------
# Conditioning and attention
# ---------------------------------------------------------------------------


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of the flow time followed by a 2-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim)
        )

    def forward(self, t) -> Tensor:
        p = next(self.parameters())
        if not isinstance(t, Tensor):
            t = torch.tensor([float(t)], dtype=p.dtype, device=p.device)
        feats = sinusoidal_features(t.to(p.dtype), self.freq_dim)
        return self.mlp(feats)


class AdaLNModulation(nn.Module):
    """Per-branch (shift, scale, gate) from a conditioning vector.

    The projection is zero-initialized, so at init every gated branch
    contributes exactly zero (adaLN-Zero).
    """

    def __init__(self, cond_dim: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 3 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cond: Tensor):
        shift, scale, gate = self.proj(cond).chunk(3, dim=-1)
        return shift[:, None, :], scale[:, None, :], gate[:, None, :]


def modulate(x_norm: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x_norm * (1 + scale) + shift


class MultiHeadAttention(nn.Module):
    """Softmax attention with optional QK normalization and rotary angles.

    QK-norm: queries and keys are L2-normalized per head, then multiplied by a
    learned per-head scale initialized to sqrt(head_dim); no further 1/sqrt(d)
    scaling is applied in that case.
    """

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None,
                 qk_norm: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qk_norm = qk_norm
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)
        if qk_norm:
            self.qk_scale = nn.Parameter(
                torch.full((heads,), math.sqrt(self.head_dim))
            )

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)

    def logits(self, xq: Tensor, xkv: Tensor,
               angles_q: Optional[Tensor] = None,
               angles_k: Optional[Tensor] = None) -> Tensor:
        """Pre-softmax attention logits [B, heads, Tq, Tk]."""
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        if self.qk_norm:
            q = torch.nn.functional.normalize(q, dim=-1)
            k = torch.nn.functional.normalize(k, dim=-1)
            q = q * self.qk_scale.to(q.dtype)[None, :, None, None]
            scale = 1.0
        else:
            scale = 1.0 / math.sqrt(self.head_dim)
        if angles_q is not None:
            q = rope_rotate(q, angles_q.to(q.dtype))
        if angles_k is not None:
            k = rope_rotate(k, angles_k.to(k.dtype))
        return torch.einsum("bhqd,bhkd->bhqk", q, k) * scale

    def forward(self, xq: Tensor, xkv: Optional[Tensor] = None,
                angles_q: Optional[Tensor] = None,
                angles_k: Optional[Tensor] = None,
                return_probs: bool = False):
        xkv = xq if xkv is None else xkv
        if return_probs:
            probs = torch.softmax(self.logits(xq, xkv, angles_q, angles_k), dim=-1)
            v = self._split(self.v(xkv))
            o = torch.einsum("bhqk,bhkd->bhqd", probs, v)
        else:
            # fused path; same math as softmax(logits()) @ v
            q = self._split(self.q(xq))
            k = self._split(self.k(xkv))
            if self.qk_norm:
                q = torch.nn.functional.normalize(q, dim=-1)
                k = torch.nn.functional.normalize(k, dim=-1)
                q = q * self.qk_scale.to(q.dtype)[None, :, None, None]
                scale = 1.0
            else:
                scale = 1.0 / math.sqrt(self.head_dim)
            if angles_q is not None:
                q = rope_rotate(q, angles_q.to(q.dtype))
            if angles_k is not None:
                k = rope_rotate(k, angles_k.to(k.dtype))
            v = self._split(self.v(xkv))
            o = torch.nn.functional.scaled_dot_product_attention(q, k, v, scale=scale)
        b, _, tq, _ = o.shape
        o = o.transpose(1, 2).reshape(b, tq, self.heads * self.head_dim)
        o = self.out(o)
        return (o, probs) if return_probs else o


class DiTBlock(nn.Module):
    """Self attention + text cross attention + MLP, each as a gated adaLN
    residual branch. Cross attention has its own modulation set and is skipped
    when no text is supplied."""

    def __init__(self, cfg: BackboneConfig, index: int):
        super().__init__()
        self.index = index
        h = cfg.hidden
        self.norm_sa = nn.LayerNorm(h, elementwise_affine=False)
        self.mod_sa = AdaLNModulation(h, h)
        self.attn = MultiHeadAttention(h, cfg.heads, qk_norm=True)
        self.norm_ca = nn.LayerNorm(h, elementwise_affine=False)
        self.mod_ca = AdaLNModulation(h, h)
        self.cross = MultiHeadAttention(h, cfg.heads, kv_dim=cfg.text_dim, qk_norm=True)
        self.norm_mlp = nn.LayerNorm(h, elementwise_affine=False)
        self.mod_mlp = AdaLNModulation(h, h)
        self.mlp = nn.Sequential(
            nn.Linear(h, cfg.mlp_hidden), nn.SiLU(), nn.Linear(cfg.mlp_hidden, h)
        )

    def forward(self, x: Tensor, cond: Tensor, text: Optional[Tensor],
                angles: Optional[Tensor]) -> Tensor:
        shift, scale, gate = self.mod_sa(cond)
        x = x + gate * self.attn(modulate(self.norm_sa(x), shift, scale),
                                 angles_q=angles, angles_k=angles)
        if text is not None:
            shift, scale, gate = self.mod_ca(cond)
            x = x + gate * self.cross(modulate(self.norm_ca(x), shift, scale), text)
        shift, scale, gate = self.mod_mlp(cond)
        x = x + gate * self.mlp(modulate(self.norm_mlp(x), shift, scale))
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite activations after DiT block {self.index}")
        return x


class Backbone(nn.Module):
    """A stack of DiT blocks with a velocity head, exposing the pieces
    (embed / block_forward / head) so a linked model can run it in lockstep
    with another backbone."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        h = cfg.hidden
        self.in_proj = nn.Linear(cfg.in_channels, h)
        self.text_table = nn.Embedding(cfg.text_vocab, cfg.text_dim)
        self.t_embed = TimestepEmbedder(h)
        self.blocks = nn.ModuleList(
            DiTBlock(cfg, i) for i in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(h, elementwise_affine=False)
        self.final_mod = nn.Linear(h, 2 * h)
        self.head = nn.Linear(h, cfg.in_channels)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.trunc_normal_(m.weight, std=0.02)
        # adaLN-Zero: gate (and shift/scale) projections start at zero
        for m in self.modules():
            if isinstance(m, AdaLNModulation):
                nn.init.zeros_(m.proj.weight)
                nn.init.zeros_(m.proj.bias)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)

    def freeze(self) -> "Backbone":
        self.requires_grad_(False)
        self.frozen = True
        return self

    # -- pieces used both by forward() and by the linked model ---------------

    def angles_for(self, n_tokens: int, grid=None, dtype=torch.float32) -> Tensor:
        if self.cfg.modality == VIDEO:
            if grid is None:
                raise ValueError("video backbone needs a token grid for 3D rotary angles")
            return rope_angles_3d(grid, self.cfg.rope_theta_base, self.cfg.head_dim,
                                  dtype=dtype)
        positions = torch.arange(n_tokens, dtype=dtype)
        return rope_angles_1d(positions, self.cfg.rope_theta_base, self.cfg.head_dim)

    def embed(self, x: Tensor, t, text_ids: Optional[Tensor], grid=None):
        """Returns (hidden stream, conditioning vector, text embeddings, angles)."""
        if x.dim() != 3:
            raise ValueError(f"expected [B, T, C], got {tuple(x.shape)}")
        if isinstance(t, Tensor) and t.dim() == 0:
            t = t[None]
        if not isinstance(t, Tensor):
            t = torch.full((x.shape[0],), float(t), dtype=x.dtype)
        cond = self.t_embed(t)
        h = self.in_proj(x)
        text = self.text_table(text_ids) if text_ids is not None else None
        angles = self.angles_for(x.shape[1], grid=grid, dtype=x.dtype)
        return h, cond, text, angles

    def block_forward(self, i: int, h: Tensor, cond: Tensor,
                      text: Optional[Tensor], angles: Tensor) -> Tensor:
        return self.blocks[i](h, cond, text, angles)

    def head_out(self, h: Tensor, cond: Tensor) -> Tensor:
        n = self.final_norm(h)
        shift, scale = self.final_mod(cond).chunk(2, dim=-1)
        return self.head(n * (1 + scale[:, None, :]) + shift[:, None, :])

    def forward(self, x: Tensor, t, text_ids: Optional[Tensor] = None,
                grid=None, taps: bool = False):
        h, cond, text, angles = self.embed(x, t, text_ids, grid=grid)
        trace = ActivationTrace() if taps else None
        for i in range(self.cfg.n_blocks):
            h = self.block_forward(i, h, cond, text, angles)
            if taps:
                trace.per_block.append(h)
        v = self.head_out(h, cond)
        return v, trace


def build_backbone(cfg: BackboneConfig, seed: int, dtype=torch.float32) -> Backbone:
    """Deterministic construction: parameters depend only on (cfg, seed)."""
    state = torch.get_rng_state()
    try:
        torch.manual_seed(derive_seed(seed, f"init:{cfg.modality}"))
        model = Backbone(cfg).to(dtype)
    finally:
        torch.set_rng_state(state)
    return model
