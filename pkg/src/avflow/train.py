"""Optimization loops for the base backbones and for fusion blocks over frozen
backbones, with condition dropout, warmup scheduling and CSV loss logs."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import data as data_mod
from .backbone import AUDIO, VIDEO, Backbone, BackboneConfig, build_backbone
from .checkpoint import parameter_digest
from .flowmatch import LogitNormalParams, fm_loss, interpolate, sample_t
from .fusion import LinkedModel, TimestepPair
from .rng import make_generator

NULL_TOKEN = 0  # embedding row reserved for the learned null condition


@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 200      # scaled down from the full-scale 10k warmup
    total_steps: int = 2000
    batch: int = 16
    t_dist_base: LogitNormalParams = field(default_factory=lambda: LogitNormalParams(0.0, 1.0))
    t_dist_fusion: LogitNormalParams = field(default_factory=lambda: LogitNormalParams(-1.0, 1.0))
    drop_text_base: float = 0.10
    drop_gen_prompt: float = 0.50
    drop_cond_prompt: float = 0.20
    t_cond_fixed: float = 0.96
    uniform_t_cond: bool = False  # ablation: t_cond ~ U(0,1) instead of fixed
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_text_base", "drop_gen_prompt", "drop_cond_prompt"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {p}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["t_dist_base"] = dataclasses.asdict(self.t_dist_base)
        d["t_dist_fusion"] = dataclasses.asdict(self.t_dist_fusion)
        return d


# Full-scale budgets kept for documentation parity: base video 250k steps,
# base audio 100k steps, fusion 50k steps, 10k warmup.
FULL_SCALE_STEPS = dict(base_video=250_000, base_audio=100_000, fusion=50_000,
                        warmup=10_000)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr, then constant."""
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return cfg.lr
    return cfg.lr * step / cfg.warmup_steps


def adamw_update(p: Tensor, g: Tensor, m: Tensor, v: Tensor, step: int,
                 lr: float, beta1: float, beta2: float, eps: float,
                 weight_decay: float) -> None:
    """One decoupled-weight-decay Adam update, in place. step counts from 1."""
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    p.mul_(1 - lr * weight_decay)
    p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)


class AdamW:
    """Minimal deterministic AdamW over explicitly listed parameters.

    Frozen parameters (requires_grad=False) are rejected rather than silently
    skipped: the caller decides what trains. Non-finite gradients skip the
    whole step and are counted instead of crashing the run.
    """

    def __init__(self, named_params, cfg: TrainConfig):
        self.cfg = cfg
        self.named_params = [(n, p) for n, p in named_params]
        for n, p in self.named_params:
            if not p.requires_grad:
                raise ValueError(f"parameter {n} is frozen; do not hand it to AdamW")
        self.m = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.v = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.t = 0
        self.skipped_steps = 0

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float) -> bool:
        grads = {n: p.grad for n, p in self.named_params}
        if any(g is not None and not torch.isfinite(g).all() for g in grads.values()):
            self.skipped_steps += 1
            return False
        self.t += 1
        b1, b2 = self.cfg.betas
        with torch.no_grad():
            for n, p in self.named_params:
                g = grads[n]
                if g is None:
                    continue
                adamw_update(p, g, self.m[n], self.v[n], self.t, lr, b1, b2,
                             self.cfg.eps, self.cfg.weight_decay)
        return True


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "dropped_conditions"])
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def encode_corpus(samples, cfg: data_mod.DataGenConfig, patch: int,
                  dtype=torch.float32):
    """Pre-encode all samples into stacked token tensors in model space."""
    audio, video, a_prompt, v_prompt = [], [], [], []
    for s in samples:
        audio.append(data_mod.encode_audio(s.audio, cfg).data)
        video.append(data_mod.encode_video(s.video, cfg, patch).data)
        a_prompt.append(s.audio_prompt or [NULL_TOKEN])
        v_prompt.append(s.video_prompt or [NULL_TOKEN])
    out = {
        AUDIO: to_model_space(torch.stack(audio).to(dtype)),
        VIDEO: to_model_space(torch.stack(video).to(dtype)),
        "audio_prompt": torch.tensor(a_prompt, dtype=torch.long),
        "video_prompt": torch.tensor(v_prompt, dtype=torch.long),
    }
    return out


def to_model_space(x: Tensor) -> Tensor:
    """Map media-space values in [0,1] to [-1,1] for the flow models."""
    return 2.0 * x - 1.0


def from_model_space(x: Tensor) -> Tensor:
    return (x + 1.0) / 2.0


class _Sampler:
    """Cycles through the dataset with a per-epoch reshuffle."""

    def __init__(self, n: int, batch: int, gen: torch.Generator):
        self.n, self.batch, self.gen = n, batch, gen
        self.order = torch.randperm(n, generator=gen)
        self.pos = 0

    def next_batch(self) -> Tensor:
        chunks = []
        need = self.batch
        while need > 0:
            if self.pos >= self.n:
                self.order = torch.randperm(self.n, generator=self.gen)
                self.pos = 0
            take = min(need, self.n - self.pos)
            chunks.append(self.order[self.pos:self.pos + take])
            self.pos += take
            need -= take
        return torch.cat(chunks)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def train_base(modality: str, samples, data_cfg: data_mod.DataGenConfig,
               bb_cfg: BackboneConfig, cfg: TrainConfig,
               dtype=torch.float32, log_every: int = 1):
    """Train one backbone with the flow-matching objective and text dropout.

    Returns (model, csv rows, dropped-count).
    """
    model = build_backbone(bb_cfg, cfg.seed, dtype=dtype)
    corpus = encode_corpus(samples, data_cfg, bb_cfg.patch, dtype=dtype)
    x1_all = corpus[modality]
    prompts = corpus[f"{modality}_prompt"]
    grid = (data_cfg.n_frames, data_cfg.height // bb_cfg.patch,
            data_cfg.width // bb_cfg.patch) if modality == VIDEO else None

    g_noise = make_generator(cfg.seed, f"base:{modality}:noise")
    g_time = make_generator(cfg.seed, f"base:{modality}:time")
    g_drop = make_generator(cfg.seed, f"base:{modality}:drop")
    g_batch = make_generator(cfg.seed, f"base:{modality}:batch")
    sampler = _Sampler(x1_all.shape[0], cfg.batch, g_batch)
    opt = AdamW(list(model.named_parameters()), cfg)

    rows = []
    n_dropped_total = 0
    for step in range(cfg.total_steps):
        idx = sampler.next_batch()
        x1 = x1_all[idx]
        x0 = torch.randn(x1.shape, generator=g_noise, dtype=torch.float64).to(dtype)
        t = sample_t(cfg.t_dist_base, g_time, (x1.shape[0],)).to(dtype)
        x_t = interpolate(x0, x1, t)
        text = prompts[idx].clone()
        drop = torch.rand(x1.shape[0], generator=g_drop) < cfg.drop_text_base
        text[drop] = NULL_TOKEN
        n_dropped = int(drop.sum())
        n_dropped_total += n_dropped

        v, _ = model(x_t, t, text, grid=grid)
        loss = fm_loss(v, x0, x1)
        opt.zero_grad()
        loss.backward()
        lr = lr_schedule(step, cfg)
        opt.step(lr)
        if step % log_every == 0 or step == cfg.total_steps - 1:
            rows.append([step, float(loss.item()), lr, n_dropped])
    return model, rows, n_dropped_total


def train_fusion(linked: LinkedModel, samples, data_cfg: data_mod.DataGenConfig,
                 cfg: TrainConfig, directions=None, dtype=torch.float32,
                 log_every: int = 1):
    """Train fusion parameters on paired data with both backbones frozen.

    directions: list of tasks to train; a multi-element list alternates tasks
    per step (joint training with shared fusion parameters). Defaults to the
    linked model's configured direction.
    """
    directions = list(directions or [linked.cfg.direction])
    pre_digest = parameter_digest(
        list(linked.backbone_a.named_parameters())
        + list(linked.backbone_v.named_parameters())
    )
    patch = linked.backbone_v.cfg.patch
    corpus = encode_corpus(samples, data_cfg, patch, dtype=dtype)

    g_noise = make_generator(cfg.seed, "fusion:noise")
    g_time = make_generator(cfg.seed, "fusion:time")
    g_cond_time = make_generator(cfg.seed, "fusion:cond_time")
    g_drop = make_generator(cfg.seed, "fusion:drop")
    g_batch = make_generator(cfg.seed, "fusion:batch")
    sampler = _Sampler(corpus[AUDIO].shape[0], cfg.batch, g_batch)
    opt = AdamW(list(linked.fusion_parameters()), cfg)

    rows = []
    t_cond_log = []
    both_dropped = both_present = 0
    for step in range(cfg.total_steps):
        direction = directions[step % len(directions)]
        gen_mod = AUDIO if direction == "v2a" else VIDEO
        cond_mod = VIDEO if direction == "v2a" else AUDIO
        idx = sampler.next_batch()
        x1 = corpus[gen_mod][idx]
        c1 = corpus[cond_mod][idx]
        b = x1.shape[0]

        x0 = torch.randn(x1.shape, generator=g_noise, dtype=torch.float64).to(dtype)
        t_gen = sample_t(cfg.t_dist_fusion, g_time, (b,)).to(dtype)
        x_t = interpolate(x0, x1, t_gen)

        if cfg.uniform_t_cond:
            t_cond = torch.rand((b,), generator=g_cond_time).to(dtype)
        else:
            t_cond = torch.full((b,), cfg.t_cond_fixed, dtype=dtype)
        c_eps = torch.randn(c1.shape, generator=g_noise, dtype=torch.float64).to(dtype)
        c_t = interpolate(c_eps, c1, t_cond)
        t_cond_log.append(float(t_cond.mean()))

        text_g = corpus[f"{gen_mod}_prompt"][idx].clone()
        text_c = corpus[f"{cond_mod}_prompt"][idx].clone()
        drop_g = torch.rand(b, generator=g_drop) < cfg.drop_gen_prompt
        drop_c = torch.rand(b, generator=g_drop) < cfg.drop_cond_prompt
        text_g[drop_g] = NULL_TOKEN
        text_c[drop_c] = NULL_TOKEN
        both_dropped += int((drop_g & drop_c).sum())
        both_present += int((~drop_g & ~drop_c).sum())

        ts = (TimestepPair(t_a=t_gen, t_v=t_cond) if direction == "v2a"
              else TimestepPair(t_a=t_cond, t_v=t_gen))
        v = linked.linked_forward(x_t, c_t, ts, texts=(text_g, text_c),
                                  direction=direction)
        loss = fm_loss(v, x0, x1)
        opt.zero_grad()
        loss.backward()
        opt.step(lr_schedule(step, cfg))
        if step % log_every == 0 or step == cfg.total_steps - 1:
            rows.append([step, float(loss.item()), lr_schedule(step, cfg),
                         int(drop_g.sum()) + int(drop_c.sum())])

    post_digest = parameter_digest(
        list(linked.backbone_a.named_parameters())
        + list(linked.backbone_v.named_parameters())
    )
    if pre_digest != post_digest:
        raise RuntimeError("frozen backbone parameters changed during fusion training")
    stats = {
        "t_cond_mean": float(np.mean(t_cond_log)),
        "t_cond_values": t_cond_log,
        "both_dropped": both_dropped,
        "both_present": both_present,
        "skipped_steps": opt.skipped_steps,
    }
    return rows, stats
