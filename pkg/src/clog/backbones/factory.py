from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

from clog.backbones.base import GenerativeBackbone
from clog.backbones.diffusion import DiffusionBackbone, EpsNet, NoiseSchedule
from clog.backbones.gan import Discriminator, GanBackbone, Generator
from clog.domain import BackboneKind
from clog.errors import InvalidInputError


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    channels: int
    resolution: int
    num_classes: int
    width: int = 16
    latent_dim: int = 32
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler_steps: int = 50
    r1_gamma: float = 0.01

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_backbone(spec: BackboneSpec, seed: int) -> GenerativeBackbone:
    """Construct a backbone whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        kind = BackboneKind(spec.kind)
        if kind is BackboneKind.DIFFUSION:
            schedule = NoiseSchedule.linear(spec.diffusion_steps, spec.beta_start, spec.beta_end)
            net = EpsNet(spec.channels, spec.num_classes, spec.width)
            backbone: GenerativeBackbone = DiffusionBackbone(net, schedule, spec.sampler_steps)
        elif kind is BackboneKind.GAN:
            if spec.resolution % 4:
                raise InvalidInputError("GAN resolution must be a multiple of 4")
            gen = Generator(spec.latent_dim, spec.num_classes, spec.channels, spec.resolution, spec.width)
            disc = Discriminator(spec.num_classes, spec.channels, spec.resolution, spec.width)
            backbone = GanBackbone(gen, disc, spec.latent_dim, spec.r1_gamma)
        else:  # pragma: no cover
            raise InvalidInputError(spec.kind)
    backbone.spec = spec
    return backbone


def spec_from_config(config, channels: int, resolution: int, num_classes: int) -> BackboneSpec:
    return BackboneSpec(
        kind=config.backbone_kind,
        channels=channels,
        resolution=resolution,
        num_classes=num_classes,
        width=config.width,
        latent_dim=config.latent_dim,
        diffusion_steps=config.diffusion_steps,
        beta_start=config.beta_start,
        beta_end=config.beta_end,
        sampler_steps=config.sampler_steps,
        r1_gamma=config.r1_gamma,
    )
