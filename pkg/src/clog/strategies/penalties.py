"""Flat-vector regularizers, importance estimators and gradient projection.

Everything here works on the concatenation of a backbone's base parameters,
so the same code serves diffusion and GAN backbones.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from clog.backbones.base import GenerativeBackbone
from clog.errors import InvalidInputError


def _check_lengths(*vectors: torch.Tensor) -> None:
    sizes = {v.numel() for v in vectors}
    if len(sizes) != 1:
        raise InvalidInputError(f"vector length mismatch: {sorted(sizes)}")


def live_flat_parameters(backbone: GenerativeBackbone) -> torch.Tensor:
    """Differentiable concatenation of the base parameters."""
    return torch.cat([p.reshape(-1) for p in backbone.base_parameters()])


def l2_penalty(params: torch.Tensor, reference: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * sum_k (theta_k - theta*_k)^2."""
    _check_lengths(params, reference)
    return lam * (params - reference).pow(2).sum()


def ewc_penalty(params: torch.Tensor, reference: torch.Tensor, importance: torch.Tensor, lam: float) -> torch.Tensor:
    """lam * sum_k F_k (theta_k - theta*_k)^2; also used for SI and MAS weights."""
    _check_lengths(params, reference, importance)
    return lam * (importance * (params - reference).pow(2)).sum()


def si_accumulate(omega: torch.Tensor, gradient: torch.Tensor, param_delta: torch.Tensor) -> torch.Tensor:
    """Path-integral contribution of one update: omega - g * delta."""
    _check_lengths(omega, gradient, param_delta)
    return omega - gradient * param_delta


def si_consolidate(omega: torch.Tensor, task_param_delta: torch.Tensor, xi: float, Omega: torch.Tensor) -> torch.Tensor:
    """Omega + omega / (delta^2 + xi), with the increment clipped at zero."""
    _check_lengths(omega, task_param_delta, Omega)
    if xi <= 0:
        raise InvalidInputError("SI damping xi must be positive")
    return Omega + omega.clamp(min=0) / (task_param_delta.pow(2) + xi)


def agem_project(g: torch.Tensor, g_ref: torch.Tensor) -> torch.Tensor:
    """Remove the component of ``g`` that would increase the reference loss."""
    _check_lengths(g, g_ref)
    dot = torch.dot(g, g_ref)
    if dot >= 0:
        return g
    ref_sq = torch.dot(g_ref, g_ref)
    if ref_sq == 0:
        return g
    out = g - (dot / ref_sq) * g_ref
    # rounding can leave a component against g_ref; remove it once more
    residual = torch.dot(out, g_ref)
    if residual < 0:
        out = out - (residual / ref_sq) * g_ref
        noise = 64 * torch.finfo(g.dtype).eps * torch.linalg.vector_norm(g)
        if torch.dot(out, g_ref) < 0 and torch.linalg.vector_norm(out) <= noise:
            # g was anti-parallel to g_ref: the exact projection is zero
            out = torch.zeros_like(g)
    return out


# -- phase-aware gradients -------------------------------------------------------


def _offsets(backbone: GenerativeBackbone) -> dict[int, tuple[int, int]]:
    out, offset = {}, 0
    for p in backbone.base_parameters():
        out[id(p)] = (offset, p.numel())
        offset += p.numel()
    return out


def scatter_phase_gradient(backbone: GenerativeBackbone, phase: str, loss: torch.Tensor, offsets=None) -> torch.Tensor:
    """Gradient of ``loss`` w.r.t. the phase's parameters, embedded in a full-length flat vector."""
    offsets = offsets or _offsets(backbone)
    params = backbone.phase_parameters(phase)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.zeros(sum(n for _, n in offsets.values()), dtype=torch.float32)
    for p, g in zip(params, grads):
        if g is None:
            continue
        start, n = offsets[id(p)]
        flat[start : start + n] = g.detach().reshape(-1).float()
    return flat


def _batches(task_data, n_batches: int, batch_size: int, generator: torch.Generator):
    images, labels = task_data.images, task_data.labels
    for _ in range(n_batches):
        idx = torch.randint(0, len(labels), (batch_size,), generator=generator)
        yield images[idx], labels[idx]


def ewc_compute_fisher(
    backbone: GenerativeBackbone,
    task_data,
    n_batches: int,
    batch_size: int = 1,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Diagonal empirical Fisher: mean over batches of the squared loss gradient.

    Each phase contributes the gradient of its own loss w.r.t. its own
    parameters (discriminator loss for D, generator loss for G).
    """
    offsets = _offsets(backbone)
    fisher = torch.zeros(backbone.num_base_parameters())
    for images, labels in _batches(task_data, n_batches, batch_size, generator):
        for phase in backbone.phases:
            loss = backbone.phase_loss(phase, images, labels, generator)
            fisher += scatter_phase_gradient(backbone, phase, loss, offsets).pow(2)
    return fisher / n_batches


def mas_importance(
    backbone: GenerativeBackbone,
    task_data,
    n_batches: int,
    batch_size: int = 1,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean absolute gradient of the squared L2 norm of the network output.

    The output is the probe output (predicted noise, or generated image for a
    GAN), so only the distillation phase's parameters receive importance.
    """
    offsets = _offsets(backbone)
    omega = torch.zeros(backbone.num_base_parameters())
    for images, labels in _batches(task_data, n_batches, batch_size, generator):
        out = backbone.probe_output(backbone.make_probe(images, labels, generator))
        objective = out.pow(2).flatten(1).sum(1).mean()
        omega += scatter_phase_gradient(backbone, backbone.distill_phase, objective, offsets).abs()
    return omega / n_batches


def kd_loss(
    backbone: GenerativeBackbone,
    teacher: GenerativeBackbone,
    images: torch.Tensor,
    labels: torch.Tensor,
    generator: torch.Generator | None,
    weight: float = 1.0,
) -> torch.Tensor:
    """weight * mean squared difference of student and teacher outputs on shared probe inputs."""
    probe = backbone.make_probe(images, labels, generator)
    student = backbone.probe_output(probe)
    with torch.no_grad():
        target = teacher.probe_output(probe)
    return weight * F.mse_loss(student, target)
