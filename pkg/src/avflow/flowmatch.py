"""Flow-matching math: linear paths, velocity targets, loss, timestep sampling,
Euler integration and guidance combination.

Everything here is a pure function over torch tensors; no module owns state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass
class FlowState:
    """A point on the noise-to-data path: the sample plus its flow time t in [0,1]."""

    sample: Tensor
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"flow time must lie in [0,1], got {self.t}")
        if not torch.isfinite(self.sample).all():
            raise ValueError("FlowState sample contains non-finite values")


@dataclass
class LogitNormalParams:
    """Parameters of the underlying normal whose sigmoid gives the timestep draw."""

    location: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")


@dataclass
class GuidanceConfig:
    """Sampler settings: guidance weight and Euler step count."""

    weight: float = 5.0
    steps: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.weight < 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0: Tensor, x1: Tensor, t) -> Tensor:
    """Linear path point t*x1 + (1-t)*x0.

    t may be a scalar or a per-sample tensor broadcastable against the leading
    batch dimension (shape [B] against inputs [B, ...]).
    """
    _check_same_shape(x0, x1, "interpolate")
    if isinstance(t, Tensor) and t.dim() > 0:
        t = t.reshape(t.shape[0], *([1] * (x0.dim() - 1)))
    return t * x1 + (1 - t) * x0


def velocity_target(x0: Tensor, x1: Tensor) -> Tensor:
    """Velocity of the linear path: constant x1 - x0."""
    _check_same_shape(x0, x1, "velocity_target")
    return x1 - x0


def fm_loss(predicted_velocity: Tensor, x0: Tensor, x1: Tensor) -> Tensor:
    """Mean squared error between the predicted velocity and x1 - x0.

    Reduction is the mean over all elements (batch included) so losses stay
    comparable across modalities with different token counts.
    """
    _check_same_shape(predicted_velocity, x0, "fm_loss")
    _check_same_shape(x0, x1, "fm_loss")
    for name, x in (("predicted_velocity", predicted_velocity), ("x0", x0), ("x1", x1)):
        if not torch.isfinite(x).all():
            raise ValueError(f"fm_loss: non-finite values in {name}")
    return ((predicted_velocity - (x1 - x0)) ** 2).mean()


def sample_t(params: LogitNormalParams, generator: torch.Generator, shape=()) -> Tensor:
    """Draw flow times as sigmoid(z), z ~ Normal(location, scale^2).

    Values lie strictly in (0,1); identical generators give identical draws.
    """
    z = torch.randn(shape, generator=generator, dtype=torch.float64)
    z = params.location + params.scale * z
    return torch.sigmoid(z)


def euler_sample(velocity_fn, x0: Tensor, steps: int) -> Tensor:
    """Integrate dx/dt = velocity_fn(x, t) from t=0 to t=1 with a left-endpoint
    uniform Euler grid t_k = k/steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        v = velocity_fn(x, k * dt)
        if not torch.isfinite(v).all():
            raise RuntimeError(
                f"euler_sample: non-finite velocity at step {k} "
                f"(|x| = {x.norm().item():.4g})"
            )
        x = x + dt * v
    return x


def cfg_combine(v_cond: Tensor, v_uncond: Tensor, weight: float) -> Tensor:
    """Classifier-free guidance: v_uncond + weight * (v_cond - v_uncond)."""
    _check_same_shape(v_cond, v_uncond, "cfg_combine")
    return v_uncond + weight * (v_cond - v_uncond)


def sinusoidal_features(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features of a flow time over log-spaced frequencies.

    t: scalar or tensor [B]; returns [dim] or [B, dim]. dim must be even.
    """
    if dim % 2 != 0:
        raise ValueError(f"feature dim must be even, got {dim}")
    if not isinstance(t, Tensor):
        t = torch.tensor(float(t))
    squeeze = t.dim() == 0
    t = t.reshape(-1)
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[:, None] * freqs[None, :] * max_period
    out = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return out[0] if squeeze else out
