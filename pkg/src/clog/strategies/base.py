"""Hook contract shared by all continual-learning strategies.

The runner drives a strategy through these calls, in this order per task::

    backbone = on_task_start(task_index, task, backbone)
    for each step:
        images, labels = compose_batch(images, labels)
        before_step(backbone)
        per phase: loss + auxiliary_loss(...) -> gradient -> transform_gradient(...) -> update
        after_step(backbone)
    on_task_end(task_index, backbone, task_data)
    select_model(i, backbone) for every i <= task_index

The base class implements every hook as a no-op, which is exactly naive
continual learning (NCL). A strategy's own randomness comes from ``self.rng``
so it never perturbs the training stream of the backbone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
import torch

from clog.backbones.base import GenerativeBackbone
from clog.domain import TaskSpec
from clog.errors import ConfigurationError


@dataclass
class StrategyConfig:
    lam: float | None = None
    buffer_capacity: int = 200
    replay_batch_size: int = 16
    lora_rank: int = 2
    kd_weight: float | None = None
    si_xi: float = 1e-3
    importance_batches: int = 64
    importance_batch_size: int = 1
    agem_batch_size: int = 64
    gr_sampler_steps: int | None = None

    # strategy_hyperparams keys that differ from the attribute name
    ALIASES = {"lambda": "lam"}

    @classmethod
    def from_hyperparams(cls, hyperparams: Mapping[str, Any], replay_batch_size: int = 16) -> "StrategyConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {"replay_batch_size": replay_batch_size}
        for key, value in hyperparams.items():
            name = cls.ALIASES.get(key, key)
            if name not in known:
                raise ConfigurationError(f"unknown strategy hyperparameter {key!r}")
            kwargs[name] = value
        for name in ("buffer_capacity", "replay_batch_size", "lora_rank", "importance_batches",
                     "importance_batch_size", "agem_batch_size"):
            kwargs[name] = int(kwargs.get(name, getattr(cls, name, 0)))
        if kwargs.get("gr_sampler_steps") is not None:
            kwargs["gr_sampler_steps"] = int(kwargs["gr_sampler_steps"])
        return cls(**kwargs)


class Strategy:
    strategy_id = "ncl"
    pooled = False  # Non-CL: train once on the union of all tasks
    grid_param: str | None = None  # hyperparameter name searched over, if any

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        self.config = config or StrategyConfig()
        self.rng = np.random.default_rng(seed)
        self.task_index = -1
        self.seen_classes: list[int] = []
        self.past_classes: list[int] = []

    # -- helpers ------------------------------------------------------------
    def torch_generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(int(self.rng.integers(0, 2**62)))

    # -- hooks --------------------------------------------------------------
    def on_task_start(self, task_index: int, task: TaskSpec, backbone: GenerativeBackbone) -> GenerativeBackbone:
        self.task_index = task_index
        self.past_classes = list(self.seen_classes)
        return backbone

    def trainable_parameters(self, backbone: GenerativeBackbone, phase: str) -> list:
        return backbone.phase_parameters(phase)

    def compose_batch(self, images: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return images, labels

    def auxiliary_loss(self, backbone: GenerativeBackbone, phase: str, images, labels) -> torch.Tensor | None:
        return None

    def transform_gradient(self, backbone: GenerativeBackbone, phase: str, params: list, flat_grad: torch.Tensor) -> torch.Tensor:
        return flat_grad

    def before_step(self, backbone: GenerativeBackbone) -> None:
        pass

    def after_step(self, backbone: GenerativeBackbone) -> None:
        pass

    def on_task_end(self, task_index: int, backbone: GenerativeBackbone, task_data) -> None:
        self.seen_classes.extend(c for c in task_data.task.class_labels if c not in self.seen_classes)

    def select_model(self, task_index: int, backbone: GenerativeBackbone) -> GenerativeBackbone:
        return backbone

    # -- bookkeeping --------------------------------------------------------
    def stored_values(self, backbone: GenerativeBackbone) -> int:
        """Number of numbers held in memory: live model plus strategy state."""
        return backbone.num_base_parameters()

    def decisions(self) -> dict[str, Any]:
        return {}


def _num(t: torch.Tensor | None) -> int:
    return 0 if t is None else int(t.numel())
