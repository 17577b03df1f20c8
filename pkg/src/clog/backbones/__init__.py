from clog.backbones.base import BackboneSnapshot, GenerativeBackbone, make_optimizers, optimization_step
from clog.backbones.diffusion import (
    DiffusionBackbone,
    NoiseSchedule,
    ddim_sample,
    ddpm_sample_step,
    diffusion_loss,
    forward_noise,
)
from clog.backbones.factory import BackboneSpec, build_backbone
from clog.backbones.gan import (
    GanBackbone,
    discriminator_loss,
    gan_sample,
    gan_train_step,
    generator_loss,
)

__all__ = [
    "BackboneSnapshot",
    "BackboneSpec",
    "DiffusionBackbone",
    "GanBackbone",
    "GenerativeBackbone",
    "NoiseSchedule",
    "build_backbone",
    "ddim_sample",
    "ddpm_sample_step",
    "diffusion_loss",
    "discriminator_loss",
    "forward_noise",
    "gan_sample",
    "gan_train_step",
    "generator_loss",
    "make_optimizers",
    "optimization_step",
]
