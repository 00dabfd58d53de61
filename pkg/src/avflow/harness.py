"""Self-contained gradient audits: finite differences against autodiff on a
tiny DiT block stack and on a fusion block, in double precision."""

from __future__ import annotations

import torch

from .backbone import AUDIO, BackboneConfig, build_backbone
from .evaluate import grad_check
from .fusion import FusionBlock, FusionConfig, TimestepPair, tau_audio_tokens, tau_video_tokens
from .rng import derive_seed, make_generator


def _jitter_params(module: torch.nn.Module, gen: torch.Generator, scale=0.02):
    """Knock zero-initialized gates off zero so every path carries gradient."""
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def dit_block_grad_check(seed: int = 0, eps: float = 1e-5, max_entries: int = 4):
    cfg = BackboneConfig(n_blocks=2, hidden=12, heads=2, mlp_hidden=24,
                         text_vocab=4, text_dim=8, in_channels=4, modality=AUDIO)
    model = build_backbone(cfg, seed, dtype=torch.float64)
    gen = make_generator(seed, "gradcheck:dit")
    _jitter_params(model, gen)
    x = torch.randn((2, 5, 4), generator=gen, dtype=torch.float64)
    t = torch.tensor([0.3, 0.7], dtype=torch.float64)
    text = torch.tensor([[1], [2]])

    def fn():
        v, _ = model(x, t, text)
        return (v ** 2).mean()

    return grad_check(fn, dict(model.named_parameters()), eps=eps,
                      max_entries=max_entries, seed=seed)


def fusion_block_grad_check(seed: int = 0, eps: float = 1e-5, max_entries: int = 4):
    cfg = FusionConfig(n_fusion=1, common_dim=8, heads=2, mlp_hidden=16)
    state = torch.get_rng_state()
    try:
        torch.manual_seed(derive_seed(seed, "gradcheck:fusion_init"))
        block = FusionBlock(cfg, dim_a=6, dim_v=10).to(torch.float64)
    finally:
        torch.set_rng_state(state)
    gen = make_generator(seed, "gradcheck:fusion")
    _jitter_params(block, gen)
    grid = (3, 2, 2)
    x_a = torch.randn((2, 7, 6), generator=gen, dtype=torch.float64)
    x_v = torch.randn((2, 12, 10), generator=gen, dtype=torch.float64)
    ts = TimestepPair(t_a=0.2, t_v=0.9)
    tau_a = tau_audio_tokens(7, eta_a=24.0, eta_v=6.0, dtype=torch.float64)
    tau_v = tau_video_tokens(grid, dtype=torch.float64)

    def fn():
        a, v = block(x_a, x_v, ts, tau_a, tau_v)
        return (a ** 2).mean() + (v ** 2).mean()

    return grad_check(fn, dict(block.named_parameters()), eps=eps,
                      max_entries=max_entries, seed=seed)
