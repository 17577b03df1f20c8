"""Task-specific low-rank adapters over frozen base weights.

A wrapped layer computes with ``W + B @ A`` (reshaped to ``W``'s shape) where
``(A, B)`` belong to the currently active task; with no active adapter the
layer is exactly the base layer. ``B`` starts at zero so a fresh adapter is an
identity delta.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from clog.errors import ConfigurationError

ADAPTABLE = (nn.Linear, nn.Conv2d, nn.Embedding)


def weight_dims(module: nn.Module) -> tuple[int, int]:
    """(d_out, d_in) of the weight viewed as a matrix."""
    w = module.weight
    return int(w.shape[0]), int(w[0].numel())


class LoraAdapter(nn.Module):
    def __init__(self, d_out: int, d_in: int, rank: int, task_index: int, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1 or rank >= min(d_in, d_out):
            raise ConfigurationError(f"LoRA rank {rank} must lie in [1, min(d_in={d_in}, d_out={d_out}))")
        bound = 1.0 / math.sqrt(d_in)
        self.A = nn.Parameter(torch.empty(rank, d_in).uniform_(-bound, bound, generator=generator))
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        self.rank = rank
        self.task_index = task_index

    def delta(self) -> torch.Tensor:
        return self.B @ self.A


class LoraLayer(nn.Module):
    def __init__(self, base: nn.Module):
        super().__init__()
        if not isinstance(base, ADAPTABLE):
            raise ConfigurationError(f"cannot adapt {type(base).__name__}")
        self.base = base
        self.lora_adapters = nn.ModuleDict()
        self.active: int | None = None

    def add_adapter(self, task_index: int, rank: int, generator: torch.Generator | None = None) -> LoraAdapter:
        d_out, d_in = weight_dims(self.base)
        adapter = LoraAdapter(d_out, d_in, rank, task_index, generator)
        self.lora_adapters[str(task_index)] = adapter
        return adapter

    def effective_weight(self) -> torch.Tensor:
        w = self.base.weight
        if self.active is None or str(self.active) not in self.lora_adapters:
            return w
        return w + self.lora_adapters[str(self.active)].delta().view_as(w)

    def forward(self, x):
        w = self.effective_weight()
        base = self.base
        if isinstance(base, nn.Linear):
            return F.linear(x, w, base.bias)
        if isinstance(base, nn.Conv2d):
            return base._conv_forward(x, w, base.bias)
        return F.embedding(x, w, base.padding_idx, base.max_norm, base.norm_type, base.scale_grad_by_freq, base.sparse)


def wrap_modules(root: nn.Module, names: list[str]) -> list[LoraLayer]:
    """Replace each named submodule by a :class:`LoraLayer` (idempotent)."""
    layers = []
    for name in names:
        parent = root
        parts = name.split(".")
        for part in parts[:-1]:
            parent = parent._modules[part]
        module = parent._modules[parts[-1]]
        if not isinstance(module, LoraLayer):
            module = LoraLayer(module)
            parent._modules[parts[-1]] = module
        layers.append(module)
    return layers


def lora_layers(root: nn.Module) -> list[LoraLayer]:
    return [m for m in root.modules() if isinstance(m, LoraLayer)]


def set_active_adapter(root: nn.Module, task_index: int | None) -> None:
    for layer in lora_layers(root):
        layer.active = task_index


def adaptable_layer_names(root: nn.Module, exclude: set[str] = frozenset()) -> list[str]:
    return [
        name
        for name, module in root.named_modules()
        if isinstance(module, ADAPTABLE) and name not in exclude and not name.endswith(".base")
    ]
