"""Class-conditional denoising diffusion backbone.

Schedules are indexed 1..T with a padding entry at index 0 so that
``alpha_bars[0] == 1`` and ``alpha_bars[t] == prod(1 - betas[1..t])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from clog.backbones.base import GenerativeBackbone
from clog.errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: torch.Tensor  # float64, length T + 1, betas[0] = 0
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = torch.as_tensor(np.asarray(betas, dtype=np.float64))
        if b.ndim != 1 or len(b) == 0:
            raise InvalidInputError("betas must be a non-empty 1-D sequence")
        if not bool(((b > 0) & (b < 1)).all()):
            raise InvalidInputError("every beta must lie in (0, 1)")
        betas = torch.cat([torch.zeros(1, dtype=torch.float64), b])
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, 0)
        # fixed isotropic reverse variance sigma_t^2 = beta_t
        return cls(betas, alphas, alpha_bars, betas.sqrt())

    @classmethod
    def linear(cls, num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, num_steps))

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1

    def check_step(self, t) -> None:
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.num_steps).any()):
            raise InvalidInputError(f"diffusion step must lie in 1..{self.num_steps}")


def _gather(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """values[t] shaped to broadcast against ``like`` (batch on dim 0)."""
    t = torch.as_tensor(t)
    out = values[t].to(like.dtype)
    if out.ndim == 0:
        return out
    return out.view(-1, *([1] * (like.ndim - 1)))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form sample of x_t given x_0: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise InvalidInputError("eps must have the same shape as x0")
    schedule.check_step(t)
    ab = _gather(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def ddpm_sample_step(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, schedule: NoiseSchedule, z: torch.Tensor | None = None) -> torch.Tensor:
    """x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t) + sigma_t z.

    ``z`` is ignored at t = 1.
    """
    if t < 1 or t > schedule.num_steps:
        raise InvalidInputError(f"diffusion step must lie in 1..{schedule.num_steps}")
    beta = schedule.betas[t].item()
    alpha = schedule.alphas[t].item()
    ab = schedule.alpha_bars[t].item()
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(alpha)
    if t > 1 and z is not None:
        mean = mean + schedule.sigmas[t].item() * z
    return mean


EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def ddpm_sample(eps_fn: EpsFn, x_T: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None = None, noise: bool = True) -> torch.Tensor:
    """Ancestral sampling from t = T down to 1; ``eps_fn(x_t, t_batch)``."""
    x = x_T
    for t in range(schedule.num_steps, 0, -1):
        t_batch = torch.full((x.shape[0],), t, dtype=torch.int64)
        eps = eps_fn(x, t_batch)
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype) if noise and t > 1 else None
        x = ddpm_sample_step(x, t, eps, schedule, z)
    return x


def ddim_timesteps(num_steps: int, n_steps: int) -> list[tuple[int, int]]:
    """Evenly strided (t, t_prev) pairs from T down to 0."""
    if n_steps < 1:
        raise InvalidInputError("n_steps must be at least 1")
    if n_steps > num_steps:
        raise InvalidInputError(f"n_steps={n_steps} exceeds the {num_steps}-step schedule")
    grid = np.round(np.linspace(0, num_steps, n_steps + 1)).astype(int).tolist()
    return [(grid[i], grid[i - 1]) for i in range(n_steps, 0, -1)]


def ddim_loop(
    eps_fn: EpsFn,
    x_T: torch.Tensor,
    schedule: NoiseSchedule,
    n_steps: int = 50,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    x0_trace: list | None = None,
) -> torch.Tensor:
    if not 0.0 <= eta <= 1.0:
        raise InvalidInputError("eta must lie in [0, 1]")
    x = x_T
    for t, t_prev in ddim_timesteps(schedule.num_steps, n_steps):
        ab = schedule.alpha_bars[t].item()
        ab_prev = schedule.alpha_bars[t_prev].item()
        eps = eps_fn(x, torch.full((x.shape[0],), t, dtype=torch.int64))
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if x0_trace is not None:
            x0_trace.append(x0_hat)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


# -- networks -----------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=1)


def _groups(channels: int) -> int:
    return math.gcd(4, channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class EpsNet(nn.Module):
    """Two-level U-Net predicting the added noise.

    Class conditioning is a learned label embedding added to the time
    embedding.
    """

    def __init__(self, channels: int = 1, num_classes: int = 10, width: int = 16, emb_dim: int | None = None):
        super().__init__()
        emb_dim = emb_dim or 4 * width
        self.time_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.label_emb = nn.Embedding(num_classes, emb_dim)
        self.inc = nn.Conv2d(channels, width, 3, padding=1)
        self.down_block = ResBlock(width, width, emb_dim)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid_block = ResBlock(2 * width, 2 * width, emb_dim)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.up_block = ResBlock(2 * width, width, emb_dim)
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, x, t, labels):
        emb = self.time_mlp(timestep_embedding(t, self.time_dim)) + self.label_emb(labels)
        h1 = self.down_block(self.inc(x), emb)
        h = self.mid_block(self.down(h1), emb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up_block(torch.cat([h, h1], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


# -- backbone -------------------------------------------------------------------


class DiffusionBackbone(GenerativeBackbone):
    phases = ("eps",)
    distill_phase = "eps"

    def __init__(self, eps_net: nn.Module, schedule: NoiseSchedule, sampler_steps: int = 50):
        super().__init__()
        self.eps_net = eps_net
        self.schedule = schedule
        self.sampler_steps = sampler_steps

    def lora_targets(self) -> list[str]:
        from clog.strategies.lora import adaptable_layer_names

        return adaptable_layer_names(self, exclude={"eps_net.out"})

    def eps(self, x_t, t, labels):
        return self.eps_net(x_t, t, labels)

    def phase_modules(self, phase):
        return [self.eps_net]

    def phase_loss(self, phase, images, labels, generator):
        return diffusion_loss(self, images, labels, generator)

    def sample(self, labels, generator, steps=None, shape=None):
        return ddim_sample(self, labels, n_steps=steps or self.sampler_steps, generator=generator, shape=shape)

    def make_probe(self, images, labels, generator):
        t = torch.randint(1, self.schedule.num_steps + 1, (len(images),), generator=generator)
        eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
        return forward_noise(images, t, eps, self.schedule), t, labels

    def probe_output(self, probe):
        x_t, t, labels = probe
        return self.eps_net(x_t, t, labels)


def diffusion_loss(backbone: DiffusionBackbone, images: torch.Tensor, labels: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Mean squared error between sampled noise and predicted noise."""
    if len(images) == 0:
        raise InvalidInputError("empty batch")
    schedule = backbone.schedule
    t = torch.randint(1, schedule.num_steps + 1, (len(images),), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    x_t = forward_noise(images, t, eps, schedule)
    return F.mse_loss(backbone.eps(x_t, t, labels), eps)


def ddim_sample(
    backbone: DiffusionBackbone,
    condition,
    n_steps: int = 50,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    shape: tuple[int, ...] | None = None,
    x_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) or stochastic DDIM sampling, clipped to [-1, 1].

    ``condition`` is a class id or a tensor of class ids (one per image).
    """
    labels = torch.as_tensor(condition, dtype=torch.int64).reshape(-1)
    if shape is None:
        shape = backbone_image_shape(backbone)
    if x_T is None:
        x_T = torch.randn((len(labels), *shape), generator=generator)
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        x = ddim_loop(lambda x, t: backbone.eps(x, t, labels), x_T, backbone.schedule, n_steps, eta, generator)
    backbone.train(was_training)
    return x.clamp(-1.0, 1.0)


def backbone_image_shape(backbone) -> tuple[int, int, int]:
    spec = getattr(backbone, "spec", None)
    if spec is None:
        raise InvalidInputError("image shape unknown; pass shape= explicitly")
    return (spec.channels, spec.resolution, spec.resolution)
