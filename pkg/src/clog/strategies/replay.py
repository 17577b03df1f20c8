"""Replay-based strategies: experience replay, generative replay and A-GEM."""

from __future__ import annotations

import torch

from clog.backbones.base import flatten_grads
from clog.data_stream import ReplayBuffer
from clog.errors import ReplayGenerationError
from clog.strategies.base import Strategy, StrategyConfig
from clog.strategies.penalties import agem_project


def _feed(buffer: ReplayBuffer, images: torch.Tensor, labels: torch.Tensor, task_index: int) -> None:
    buffer.add_batch(images.detach(), labels, task_index)


class ExperienceReplay(Strategy):
    """Mixes reservoir-buffer samples into every batch after the first task."""

    strategy_id = "er"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, rng=self.rng)

    def compose_batch(self, images, labels):
        n = self.config.replay_batch_size
        replay = n > 0 and self.task_index > 0 and not self.buffer.is_empty()
        if replay:
            r_images, r_labels = self.buffer.sample_tensors(n, self.rng)
        _feed(self.buffer, images, labels, self.task_index)
        if not replay:
            return images, labels
        return torch.cat([images, r_images]), torch.cat([labels, r_labels])

    def stored_values(self, backbone):
        return super().stored_values(backbone) + self.buffer.num_stored_values()

    def decisions(self):
        return {"buffer_capacity": self.config.buffer_capacity, "replay_batch_size": self.config.replay_batch_size}


class GenerativeReplay(Strategy):
    """Replays samples drawn from a frozen copy of the model taken at task start."""

    strategy_id = "gr"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.sampler = None

    def on_task_start(self, task_index, task, backbone):
        backbone = super().on_task_start(task_index, task, backbone)
        self.sampler = backbone.frozen_copy() if task_index > 0 else None
        return backbone

    def replay_batch(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        classes = torch.tensor(self.past_classes, dtype=torch.int64)
        labels = classes[torch.as_tensor(self.rng.integers(0, len(classes), size=n))]
        images = self.sampler.sample(labels, self.torch_generator(), steps=self.config.gr_sampler_steps)
        if not torch.isfinite(images).all():
            raise ReplayGenerationError("generative replay produced non-finite pixels")
        return images.detach(), labels

    def compose_batch(self, images, labels):
        n = self.config.replay_batch_size
        if n <= 0 or self.sampler is None or not self.past_classes:
            return images, labels
        r_images, r_labels = self.replay_batch(n)
        return torch.cat([images, r_images.to(images.dtype)]), torch.cat([labels, r_labels])

    def stored_values(self, backbone):
        extra = self.sampler.num_base_parameters() if self.sampler is not None else 0
        return super().stored_values(backbone) + extra

    def decisions(self):
        return {"replay_conditions": "uniform over previously seen classes"}


class AGEM(Strategy):
    """Projects each phase gradient so the loss on a replay batch does not increase.

    The reservoir sees the whole stream; reference batches use only the
    stored samples of earlier tasks.
    """

    strategy_id = "agem"

    def __init__(self, config: StrategyConfig | None = None, seed: int = 0):
        super().__init__(config, seed)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, rng=self.rng)
        self.projections = 0

    def compose_batch(self, images, labels):
        _feed(self.buffer, images, labels, self.task_index)
        return images, labels

    def past_samples(self):
        return [s for s in self.buffer.slots if s.task_index < self.task_index]

    def reference_gradient(self, backbone, phase, params, past) -> torch.Tensor:
        idx = self.rng.integers(0, len(past), size=self.config.agem_batch_size)
        images = torch.stack([past[i].target for i in idx])
        labels = torch.tensor([past[i].condition for i in idx], dtype=torch.int64)
        loss = backbone.phase_loss(phase, images, labels, self.torch_generator())
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        return flatten_grads(params, grads).detach()

    def transform_gradient(self, backbone, phase, params, flat_grad):
        past = self.past_samples() if self.task_index > 0 else []
        if not past:
            return flat_grad
        projected = agem_project(flat_grad, self.reference_gradient(backbone, phase, params, past))
        if projected is not flat_grad:
            self.projections += 1
        return projected

    def stored_values(self, backbone):
        return super().stored_values(backbone) + self.buffer.num_stored_values()

    def decisions(self):
        return {"reference_batch_size": self.config.agem_batch_size, "projections": self.projections}
