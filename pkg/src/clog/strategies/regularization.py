"""Regularization-based strategies: KD, L2, EWC, SI and MAS.

L2, EWC, SI and MAS share one penalty ``lam * sum_k w_k (theta_k - theta*_k)^2``
over the flat base-parameter vector and differ only in how ``w`` is built.
A zero weight makes every hook a no-op, so the run matches NCL exactly.
"""

from __future__ import annotations

import torch

from clog.strategies.base import Strategy, StrategyConfig
from clog.strategies.penalties import (
    ewc_compute_fisher,
    ewc_penalty,
    kd_loss,
    l2_penalty,
    live_flat_parameters,
    mas_importance,
    si_accumulate,
    si_consolidate,
)


class KnowledgeDistillation(Strategy):
    """Matches the outputs of a frozen copy taken at the start of each later task."""

    strategy_id = "kd"
    grid_param = "kd_weight"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.teacher = None

    @property
    def weight(self) -> float:
        return 1.0 if self.config.kd_weight is None else float(self.config.kd_weight)

    def on_task_start(self, task_index, task, backbone):
        backbone = super().on_task_start(task_index, task, backbone)
        self.teacher = backbone.frozen_copy() if task_index > 0 and self.weight != 0 else None
        return backbone

    def auxiliary_loss(self, backbone, phase, images, labels):
        if self.teacher is None or phase != backbone.distill_phase:
            return None
        return kd_loss(backbone, self.teacher, images, labels, self.torch_generator(), self.weight)

    def stored_values(self, backbone):
        extra = self.teacher.num_base_parameters() if self.teacher is not None else 0
        return super().stored_values(backbone) + extra

    def decisions(self):
        return {"kd_weight": self.weight, "kd_inputs": "current-task batch (noised inputs or shared latents)"}


class ParameterRegularizer(Strategy):
    """Base for the quadratic anchors; subclasses fill ``importance``."""

    grid_param = "lambda"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.reference: torch.Tensor | None = None
        self.importance: torch.Tensor | None = None

    @property
    def lam(self) -> float:
        return 1.0 if self.config.lam is None else float(self.config.lam)

    def penalty(self, backbone) -> torch.Tensor:
        params = live_flat_parameters(backbone)
        if self.importance is None:
            return l2_penalty(params, self.reference, self.lam)
        return ewc_penalty(params, self.reference, self.importance, self.lam)

    def auxiliary_loss(self, backbone, phase, images, labels):
        if self.reference is None or self.lam == 0:
            return None
        return self.penalty(backbone)

    def update_importance(self, task_index, backbone, task_data) -> None:
        pass

    def on_task_end(self, task_index, backbone, task_data):
        if self.lam != 0:
            self.update_importance(task_index, backbone, task_data)
            self.reference = backbone.flat_parameters().clone()
        super().on_task_end(task_index, backbone, task_data)

    def stored_values(self, backbone):
        extra = sum(v.numel() for v in (self.reference, self.importance) if v is not None)
        return super().stored_values(backbone) + extra

    def decisions(self):
        return {"lambda": self.lam}


class L2(ParameterRegularizer):
    strategy_id = "l2"


class EWC(ParameterRegularizer):
    """Diagonal empirical Fisher, summed over finished tasks."""

    strategy_id = "ewc"

    def update_importance(self, task_index, backbone, task_data):
        fisher = ewc_compute_fisher(
            backbone,
            task_data,
            self.config.importance_batches,
            self.config.importance_batch_size,
            self.torch_generator(),
        )
        self.importance = fisher if self.importance is None else self.importance + fisher


class MAS(ParameterRegularizer):
    """Output-sensitivity importance, summed over finished tasks."""

    strategy_id = "mas"

    def update_importance(self, task_index, backbone, task_data):
        omega = mas_importance(
            backbone,
            task_data,
            self.config.importance_batches,
            self.config.importance_batch_size,
            self.torch_generator(),
        )
        self.importance = omega if self.importance is None else self.importance + omega

    def decisions(self):
        return {**super().decisions(), "mas_output": "probe output of the distillation phase (generator for GANs)"}


class SI(ParameterRegularizer):
    """Path-integral importance accumulated from the applied updates."""

    strategy_id = "si"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.omega: torch.Tensor | None = None
        self.task_start: torch.Tensor | None = None
        self._before: torch.Tensor | None = None

    def on_task_start(self, task_index, task, backbone):
        backbone = super().on_task_start(task_index, task, backbone)
        if self.lam != 0:
            self.task_start = backbone.flat_parameters().clone()
            self.omega = torch.zeros_like(self.task_start)
        return backbone

    def before_step(self, backbone):
        if self.lam != 0:
            self._before = backbone.flat_parameters().clone()

    def after_step(self, backbone):
        if self.lam == 0:
            return
        grad = torch.cat(
            [(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in backbone.base_parameters()]
        ).detach()
        delta = backbone.flat_parameters() - self._before
        self.omega = si_accumulate(self.omega, grad, delta)

    def update_importance(self, task_index, backbone, task_data):
        delta = backbone.flat_parameters() - self.task_start
        previous = self.importance if self.importance is not None else torch.zeros_like(delta)
        self.importance = si_consolidate(self.omega, delta, self.config.si_xi, previous)
        self.omega = torch.zeros_like(self.omega)

    def stored_values(self, backbone):
        extra = sum(v.numel() for v in (self.omega, self.task_start) if v is not None)
        return super().stored_values(backbone) + extra

    def decisions(self):
        return {**super().decisions(), "si_xi": self.config.si_xi}
