"""V2A and A2V generation: fixed-noise conditioning, Euler sampling with
classifier-free guidance, decode back to media space."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from . import data as data_mod
from .backbone import AUDIO, VIDEO, TokenSequence
from .flowmatch import GuidanceConfig, cfg_combine
from .fusion import LinkedModel, TimestepPair
from .rng import make_generator
from .train import NULL_TOKEN, from_model_space, to_model_space


@torch.no_grad()
def generate(linked: LinkedModel, cond_tokens: Tensor, direction: str,
             prompts: tuple[Optional[Tensor], Optional[Tensor]],
             g: GuidanceConfig, t_cond: float, seed: int,
             resample_cond_noise: bool = False,
             diagnostics: Optional[list] = None) -> Tensor:
    """Sample the generated modality's tokens (model space, [B, T, C]).

    The conditioning media is noised once to t_cond with a single seeded draw
    that is reused at every sampler step (set resample_cond_noise to redraw per
    step instead). The unconditional branch drops every condition at once —
    the text prompts and the conditioning modality itself — so it is the plain
    frozen backbone with a null prompt and guidance amplifies the full
    cross-modal conditioning signal. It is skipped when the weight is 1.
    """
    gen_bb = linked.backbone_a if direction == "v2a" else linked.backbone_v
    if linked.cfg.direction != direction and not linked.cfg.shared_params_across_tasks:
        # A dedicated model may still be driven in either direction; the caller
        # owns that choice. Nothing to enforce here beyond modality shapes.
        pass
    b = cond_tokens.shape[0]
    dtype = cond_tokens.dtype

    g_cond = make_generator(seed, "infer:cond_noise")
    g_init = make_generator(seed, "infer:init_noise")

    def noise_like(x, gen):
        return torch.randn(x.shape, generator=gen, dtype=torch.float64).to(dtype)

    eps = noise_like(cond_tokens, g_cond)
    cond_t = t_cond * cond_tokens + (1 - t_cond) * eps
    cond_hash = cond_t.clone()

    gen_shape = (b, _gen_token_count(linked, direction),
                 gen_bb.cfg.in_channels)
    x = noise_like(torch.empty(gen_shape), g_init)

    text_g, text_c = prompts
    null_g = torch.full((b, 1), NULL_TOKEN, dtype=torch.long)
    gen_grid = linked.video_grid if direction == "a2v" else None

    steps = g.steps
    dt = 1.0 / steps
    for k in range(steps):
        if resample_cond_noise:
            eps = noise_like(cond_tokens, g_cond)
            cond_t = t_cond * cond_tokens + (1 - t_cond) * eps
        else:
            assert torch.equal(cond_t, cond_hash), "conditioning drifted between steps"
        t_gen = k * dt
        ts = (TimestepPair(t_a=t_gen, t_v=t_cond) if direction == "v2a"
              else TimestepPair(t_a=t_cond, t_v=t_gen))
        v_cond = linked.linked_forward(x, cond_t, ts, texts=(text_g, text_c),
                                       direction=direction)
        if g.weight == 1.0:
            v = v_cond
        else:
            # all conditions dropped at once: no fusion, null text prompt —
            # exactly the frozen single-modality backbone
            v_uncond, _ = gen_bb(x, t_gen, null_g, grid=gen_grid)
            v = cfg_combine(v_cond, v_uncond, g.weight)
        if not torch.isfinite(v).all():
            raise RuntimeError(f"non-finite sampler state at step {k}")
        x = x + dt * v
        if diagnostics is not None:
            diagnostics.append((k, float(x.norm()), float(v.norm())))
    return x


def _gen_token_count(linked: LinkedModel, direction: str) -> int:
    if direction == "v2a":
        # audio token count follows from the shared media duration
        f, hp, wp = linked.video_grid
        duration = f / linked.eta_v
        return round(duration * linked.eta_a)
    f, hp, wp = linked.video_grid
    return f * hp * wp


def decode_generated(tokens: Tensor, direction: str,
                     data_cfg: data_mod.DataGenConfig, patch: int = 2):
    """Map sampled tokens back to media space ([0,1] clamped numpy arrays)."""
    media = from_model_space(tokens).clamp(0.0, 1.0)
    out = []
    for i in range(media.shape[0]):
        if direction == "v2a":
            ts = TokenSequence(media[i], AUDIO, data_cfg.audio_rate)
            out.append(data_mod.decode_audio(ts))
        else:
            grid = (data_cfg.n_frames, data_cfg.height // patch,
                    data_cfg.width // patch)
            ts = TokenSequence(media[i], VIDEO, data_cfg.fps, grid=grid)
            out.append(data_mod.decode_video(ts, data_cfg, patch))
    return out


def sweep_t_cond(linked: LinkedModel, grid, eval_fn, csv_path=None):
    """Evaluate a metric over a grid of conditioning flow times.

    eval_fn(t_cond) -> score runs generation on a fixed eval set. Returns the
    curve as a list of (t_cond, score) and optionally writes it as CSV.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty t_cond grid")
    curve = [(float(t), float(eval_fn(float(t)))) for t in grid]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_cond", "score"])
            w.writerows(curve)
    return curve
