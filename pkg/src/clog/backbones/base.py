"""Shared contract for trainable conditional generators.

A backbone is an ``nn.Module`` split into one or more optimisation *phases*
(one for diffusion, discriminator then generator for a GAN). Every
continual-learning strategy talks to a backbone only through this surface:
phase losses, sampling, a probe output used for distillation and importance
estimation, and a flat view of the base parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
from torch import nn

from clog.errors import DivergenceError, InvalidInputError

ADAPTER_TAG = "lora_"


@dataclass
class BackboneSnapshot:
    parameters: torch.Tensor
    metadata: dict = field(default_factory=dict)


class GenerativeBackbone(nn.Module):
    phases: tuple[str, ...] = ()
    adam_betas: tuple[float, float] = (0.9, 0.999)
    spec = None  # BackboneSpec used to rebuild the architecture, if any

    # -- to be provided by subclasses ------------------------------------
    def phase_modules(self, phase: str) -> list[nn.Module]:
        raise NotImplementedError

    def phase_loss(self, phase: str, images, labels, generator: torch.Generator) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, labels: torch.Tensor, generator: torch.Generator, steps: int | None = None) -> torch.Tensor:
        raise NotImplementedError

    def make_probe(self, images, labels, generator: torch.Generator):
        """Random network inputs built from a data batch, shared by teacher and student."""
        raise NotImplementedError

    def probe_output(self, probe) -> torch.Tensor:
        raise NotImplementedError

    distill_phase: str = ""

    # -- parameter views ---------------------------------------------------
    def base_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ADAPTER_TAG not in n]

    def base_parameters(self) -> list[nn.Parameter]:
        return [p for _, p in self.base_named_parameters()]

    def phase_parameters(self, phase: str) -> list[nn.Parameter]:
        seen, out = set(), []
        for module in self.phase_modules(phase):
            for name, p in module.named_parameters():
                if ADAPTER_TAG in name or id(p) in seen:
                    continue
                seen.add(id(p))
                out.append(p)
        return out

    def num_base_parameters(self) -> int:
        return sum(p.numel() for p in self.base_parameters())

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.base_parameters()])

    def set_flat_parameters(self, vector: torch.Tensor) -> None:
        params = self.base_parameters()
        total = sum(p.numel() for p in params)
        if vector.numel() != total:
            raise InvalidInputError(f"parameter vector has {vector.numel()} entries, backbone has {total}")
        offset = 0
        with torch.no_grad():
            for p in params:
                p.copy_(vector[offset : offset + p.numel()].view_as(p))
                offset += p.numel()

    def snapshot(self, **metadata) -> BackboneSnapshot:
        return BackboneSnapshot(self.flat_parameters().clone(), dict(metadata))

    def restore(self, snapshot: BackboneSnapshot) -> None:
        self.set_flat_parameters(snapshot.parameters)

    def frozen_copy(self) -> "GenerativeBackbone":
        clone = copy.deepcopy(self)
        clone.eval()
        for p in clone.parameters():
            p.requires_grad_(False)
        return clone

    def fresh_copy(self, seed: int) -> "GenerativeBackbone":
        """Same architecture, newly initialised from ``seed``."""
        if self.spec is None:
            raise InvalidInputError("backbone has no spec to rebuild from")
        from clog.backbones.factory import build_backbone

        return build_backbone(self.spec, seed)


def flatten_grads(params, grads) -> torch.Tensor:
    return torch.cat(
        [(g if g is not None else torch.zeros_like(p)).reshape(-1) for p, g in zip(params, grads)]
    )


def assign_flat_grad(params, flat: torch.Tensor) -> None:
    offset = 0
    for p in params:
        n = p.numel()
        p.grad = flat[offset : offset + n].view_as(p).clone()
        offset += n


def optimizer_params(optimizer: torch.optim.Optimizer) -> list[nn.Parameter]:
    return [p for group in optimizer.param_groups for p in group["params"]]


def optimization_step(
    backbone: GenerativeBackbone,
    images: torch.Tensor,
    labels: torch.Tensor,
    optimizers: Mapping[str, torch.optim.Optimizer],
    generator: torch.Generator,
    aux_loss: Callable[[str], torch.Tensor | None] | None = None,
    transform_gradient: Callable[[str, list, torch.Tensor], torch.Tensor] | None = None,
    step: int = 0,
) -> dict[str, float]:
    """One update of every phase in order.

    Per phase: base loss, plus ``aux_loss(phase)``, gradient of the sum with
    respect to the phase optimizer's parameters, ``transform_gradient`` on the
    flattened gradient, optimizer step. Raises :class:`DivergenceError` on a
    non-finite loss before any parameter of that phase is touched.
    """
    losses = {}
    for phase in backbone.phases:
        optimizer = optimizers[phase]
        params = optimizer_params(optimizer)
        loss = backbone.phase_loss(phase, images, labels, generator)
        total = loss
        if aux_loss is not None:
            extra = aux_loss(phase)
            if extra is not None:
                total = total + extra
        if not torch.isfinite(total.detach()):
            raise DivergenceError(step, f"non-finite {phase} loss")
        grads = torch.autograd.grad(total, params, allow_unused=True)
        flat = flatten_grads(params, grads)
        if transform_gradient is not None:
            flat = transform_gradient(phase, params, flat)
        assign_flat_grad(params, flat)
        optimizer.step()
        losses[phase] = float(loss.detach())
    return losses


def make_optimizers(
    backbone: GenerativeBackbone,
    lr: float,
    params_for_phase: Callable[[str], list] | None = None,
    betas: tuple[float, float] | None = None,
) -> dict[str, torch.optim.Optimizer]:
    betas = betas or getattr(backbone, "adam_betas", (0.9, 0.999))
    out = {}
    for phase in backbone.phases:
        params = params_for_phase(phase) if params_for_phase else backbone.phase_parameters(phase)
        out[phase] = torch.optim.Adam(params, lr=lr, betas=betas)
    return out
