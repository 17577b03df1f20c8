"""Parameter-isolation strategies (Ensemble, C-LoRA) and the pooled Non-CL reference."""

from __future__ import annotations

from typing import Sequence

from clog.data_stream import TaskData, pool_task_data
from clog.domain import TaskSequence
from clog.errors import InvalidInputError
from clog.strategies.base import Strategy, StrategyConfig
from clog.strategies.lora import lora_layers, set_active_adapter, wrap_modules


class Ensemble(Strategy):
    """One independently initialised model per task."""

    strategy_id = "ensemble"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.models: dict[int, object] = {}

    def on_task_start(self, task_index, task, backbone):
        backbone = super().on_task_start(task_index, task, backbone)
        if task_index > 0:
            backbone = backbone.fresh_copy(int(self.rng.integers(0, 2**31 - 1)))
        return backbone

    def on_task_end(self, task_index, backbone, task_data):
        self.models[task_index] = backbone.frozen_copy()
        super().on_task_end(task_index, backbone, task_data)

    def select_model(self, task_index, backbone):
        if task_index == self.task_index and task_index not in self.models:
            return backbone
        if task_index not in self.models:
            raise InvalidInputError(f"no ensemble member has been trained for task {task_index}")
        return self.models[task_index]

    def stored_values(self, backbone):
        return backbone.num_base_parameters() * max(len(self.models), self.task_index + 1, 1)


class CLoRA(Strategy):
    """Full training on the first task, then one low-rank adapter per task on frozen weights."""

    strategy_id = "clora"

    def on_task_start(self, task_index, task, backbone):
        backbone = super().on_task_start(task_index, task, backbone)
        if task_index == 0:
            set_active_adapter(backbone, None)
            return backbone
        layers = wrap_modules(backbone, backbone.lora_targets())
        for p in backbone.base_parameters():
            p.requires_grad_(False)
        generator = self.torch_generator()
        for layer in layers:
            layer.add_adapter(task_index, self.config.lora_rank, generator)
        set_active_adapter(backbone, task_index)
        return backbone

    def trainable_parameters(self, backbone, phase):
        if self.task_index <= 0:
            return backbone.phase_parameters(phase)
        key = str(self.task_index)
        params = []
        for module in backbone.phase_modules(phase):
            for layer in lora_layers(module):
                if key in layer.lora_adapters:
                    params.extend(layer.lora_adapters[key].parameters())
        return params

    def select_model(self, task_index, backbone):
        if task_index > self.task_index:
            raise InvalidInputError(f"no adapter has been trained for task {task_index}")
        set_active_adapter(backbone, task_index if task_index > 0 else None)
        return backbone

    def stored_values(self, backbone):
        adapters = sum(p.numel() for layer in lora_layers(backbone) for p in layer.lora_adapters.parameters())
        return backbone.num_base_parameters() + adapters

    def decisions(self):
        return {"lora_rank": self.config.lora_rank}


class NonCL(Strategy):
    """Upper-bound reference: one model trained on the union of all tasks."""

    strategy_id = "noncl"
    pooled = True


def noncl_pool(sequence: TaskSequence, task_data: Sequence[TaskData]) -> TaskData:
    if len(task_data) != len(sequence.tasks):
        raise InvalidInputError("need the data of every task to pool")
    return pool_task_data(task_data)
