"""Class-conditional GAN backbone.

The discriminator returns logits; ``D(x) = sigmoid(logit)``. Both losses are
written in terms of logits with ``softplus`` so that they stay finite when
``D`` saturates:  -log D = softplus(-l),  -log(1 - D) = softplus(l).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from clog.backbones.base import GenerativeBackbone, make_optimizers, optimization_step
from clog.errors import InvalidInputError


class Generator(nn.Module):
    def __init__(self, latent_dim: int = 32, num_classes: int = 10, channels: int = 1, resolution: int = 8, width: int = 16):
        super().__init__()
        if resolution % 4:
            raise InvalidInputError("generator resolution must be a multiple of 4")
        self.base = resolution // 4
        self.width = width
        self.label_emb = nn.Embedding(num_classes, latent_dim)
        self.fc = nn.Linear(2 * latent_dim, 2 * width * self.base * self.base)
        self.conv1 = nn.Conv2d(2 * width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, z, labels):
        h = self.fc(torch.cat([z, self.label_emb(labels)], dim=1))
        h = F.leaky_relu(h, 0.2).view(-1, 2 * self.width, self.base, self.base)
        h = F.leaky_relu(self.conv1(F.interpolate(h, scale_factor=2, mode="nearest")), 0.2)
        h = F.leaky_relu(self.conv2(F.interpolate(h, scale_factor=2, mode="nearest")), 0.2)
        return torch.tanh(self.out(h))


class Discriminator(nn.Module):
    """Conv features with a projection head: logit = w.phi + <embed(y), phi>."""

    def __init__(self, num_classes: int = 10, channels: int = 1, resolution: int = 8, width: int = 16):
        super().__init__()
        self.conv0 = nn.Conv2d(channels, width, 3, padding=1)
        self.conv1 = nn.Conv2d(width, 2 * width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1)
        feat = 2 * width * (resolution // 4) ** 2
        self.head = nn.Linear(feat, 1)
        self.label_proj = nn.Embedding(num_classes, feat)

    def forward(self, x, labels):
        h = F.leaky_relu(self.conv0(x), 0.2)
        h = F.leaky_relu(self.conv1(h), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2).flatten(1)
        return self.head(h).squeeze(1) + (self.label_proj(labels) * h).sum(1)


class GanBackbone(GenerativeBackbone):
    phases = ("d", "g")
    distill_phase = "g"
    adam_betas = (0.0, 0.99)

    def __init__(self, generator: nn.Module, discriminator: nn.Module, latent_dim: int, r1_gamma: float = 0.0, saturating: bool = False):
        super().__init__()
        # generator first: its parameters lead the flat vector
        self.generator = generator
        self.discriminator = discriminator
        self.latent_dim = latent_dim
        self.r1_gamma = r1_gamma
        self.saturating = saturating

    def lora_targets(self) -> list[str]:
        from clog.strategies.lora import adaptable_layer_names

        return adaptable_layer_names(self, exclude={"generator.out", "discriminator.head"})

    def G(self, z, labels):
        return self.generator(z, labels)

    def D_logit(self, x, labels):
        return self.discriminator(x, labels)

    def D(self, x, labels):
        return torch.sigmoid(self.D_logit(x, labels))

    def draw_latents(self, n: int, generator: torch.Generator | None, dtype=torch.float32) -> torch.Tensor:
        return torch.randn((n, self.latent_dim), generator=generator, dtype=dtype)

    def phase_modules(self, phase):
        return [self.discriminator] if phase == "d" else [self.generator]

    def phase_loss(self, phase, images, labels, generator):
        if phase == "d":
            return discriminator_loss(self, images, labels, generator)
        z = self.draw_latents(len(labels), generator, images.dtype)
        return generator_loss(self, z, labels)

    def sample(self, labels, generator, steps=None):
        return gan_sample(self, labels, generator=generator)

    def make_probe(self, images, labels, generator):
        return self.draw_latents(len(labels), generator, images.dtype), labels

    def probe_output(self, probe):
        z, labels = probe
        return self.G(z, labels)


def r1_penalty(backbone: GanBackbone, real: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """E ||d logit / d x||^2 on real samples (StyleGAN convention)."""
    real = real.detach().requires_grad_(True)
    logits = backbone.D_logit(real, labels)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return logits.new_zeros(())
    return grad.pow(2).flatten(1).sum(1).mean()


def discriminator_loss(backbone: GanBackbone, real_batch: torch.Tensor, conditions: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
    """-[E log D(x) + E log(1 - D(G(z)))] + (gamma / 2) R1."""
    if len(real_batch) == 0:
        raise InvalidInputError("empty batch")
    z = backbone.draw_latents(len(conditions), rng, real_batch.dtype)
    with torch.no_grad():
        fake = backbone.G(z, conditions)
    loss = F.softplus(-backbone.D_logit(real_batch, conditions)).mean()
    loss = loss + F.softplus(backbone.D_logit(fake, conditions)).mean()
    if backbone.r1_gamma > 0:
        loss = loss + 0.5 * backbone.r1_gamma * r1_penalty(backbone, real_batch, conditions)
    return loss


def generator_loss(backbone: GanBackbone, z_batch: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
    """Non-saturating -E log D(G(z)); the literal E log(1 - D(G(z))) when ``saturating``."""
    logits = backbone.D_logit(backbone.G(z_batch, conditions), conditions)
    if backbone.saturating:
        return -F.softplus(logits).mean()
    return F.softplus(-logits).mean()


def gan_train_step(
    backbone: GanBackbone,
    real_batch: torch.Tensor,
    conditions: torch.Tensor,
    optimizers: dict | None = None,
    rng: torch.Generator | None = None,
    step: int = 0,
    lr: float = 2.5e-3,
) -> tuple[float, float]:
    """One discriminator update followed by one generator update."""
    if optimizers is None:
        optimizers = make_optimizers(backbone, lr, betas=backbone.adam_betas)
    losses = optimization_step(backbone, real_batch, conditions, optimizers, rng, step=step)
    return losses["d"], losses["g"]


def gan_sample(backbone: GanBackbone, condition, n: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
    labels = torch.as_tensor(condition, dtype=torch.int64).reshape(-1)
    if n is not None:
        if n < 1:
            raise InvalidInputError("n must be at least 1")
        if len(labels) == 1:
            labels = labels.repeat(n)
        elif len(labels) != n:
            raise InvalidInputError("got both n and a condition vector of a different length")
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        images = backbone.G(backbone.draw_latents(len(labels), generator), labels)
    backbone.train(was_training)
    return images.clamp(-1.0, 1.0)

