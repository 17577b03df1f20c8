"""Per-task data partitions, batching and the reservoir replay buffer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

from clog.datasets import LabeledDataset, load_dataset  # noqa: F401  (re-export)
from clog.domain import TaskSequence, TaskSpec
from clog.errors import DataAccessError, DataError, EmptyBufferError, InvalidInputError


class Sample(NamedTuple):
    condition: int
    target: torch.Tensor
    task_index: int = -1


class TaskData:
    """Training data of one task.

    Once :meth:`close` is called every read of the raw samples raises
    :class:`DataAccessError`; this is how the runner enforces that finished
    tasks are only reachable through a replay buffer.
    """

    def __init__(self, task: TaskSpec, images: torch.Tensor, labels: torch.Tensor):
        bad = set(labels.unique().tolist()) - set(task.class_labels)
        if bad:
            raise DataError(f"task {task.task_index} got samples of foreign classes {sorted(bad)}")
        self.task = task
        self._images = images
        self._labels = labels
        self._closed = False
        self.reads = 0

    def __len__(self) -> int:
        return len(self._labels)

    def _guard(self):
        if self._closed:
            raise DataAccessError(f"raw data of task {self.task.task_index} is no longer accessible")
        self.reads += 1

    @property
    def images(self) -> torch.Tensor:
        self._guard()
        return self._images

    @property
    def labels(self) -> torch.Tensor:
        self._guard()
        return self._labels

    @property
    def samples(self) -> list[Sample]:
        self._guard()
        return [Sample(int(y), x, self.task.task_index) for x, y in zip(self._images, self._labels)]

    @property
    def closed(self) -> bool:
        return self._closed

    def close(self) -> None:
        self._closed = True


def partition_by_task(dataset: LabeledDataset, sequence: TaskSequence) -> list[TaskData]:
    if sequence.dataset_id and sequence.dataset_id != dataset.dataset_id:
        raise InvalidInputError(
            f"sequence was built for {sequence.dataset_id!r}, dataset is {dataset.dataset_id!r}"
        )
    owner = np.full(dataset.num_classes, -1, dtype=np.int64)
    for position, task in enumerate(sequence.tasks):
        owner[list(task.class_labels)] = position
    labels = dataset.labels.numpy()
    task_of_sample = owner[labels]
    if (task_of_sample < 0).any():
        orphan = sorted(set(labels[task_of_sample < 0].tolist()))
        raise DataError(f"labels {orphan} belong to no task")
    parts = []
    for position, task in enumerate(sequence.tasks):
        idx = torch.from_numpy(np.flatnonzero(task_of_sample == position))
        parts.append(TaskData(task, dataset.images[idx], dataset.labels[idx]))
    return parts


def pool_task_data(parts: Sequence[TaskData]) -> TaskData:
    """Concatenate all tasks into one pseudo-task holding every class."""
    if not parts:
        raise InvalidInputError("nothing to pool")
    labels = tuple(c for p in parts for c in p.task.class_labels)
    task = TaskSpec(0, labels, "pooled")
    return TaskData(task, torch.cat([p.images for p in parts]), torch.cat([p.labels for p in parts]))


class BatchSampler:
    """Epoch-wise shuffled minibatches drawn with a torch generator."""

    def __init__(self, data: TaskData, batch_size: int, generator: torch.Generator):
        self.data = data
        self.batch_size = batch_size
        self.generator = generator
        self._perm = torch.empty(0, dtype=torch.int64)
        self._pos = 0

    def next(self) -> tuple[torch.Tensor, torch.Tensor]:
        n = len(self.data)
        take = []
        need = self.batch_size
        while need > 0:
            if self._pos >= len(self._perm):
                self._perm = torch.randperm(n, generator=self.generator)
                self._pos = 0
            chunk = self._perm[self._pos : self._pos + need]
            self._pos += len(chunk)
            need -= len(chunk)
            take.append(chunk)
        idx = torch.cat(take)
        return self.data.images[idx], self.data.labels[idx]


# -- reservoir replay buffer ------------------------------------------------


@dataclass
class ReplayBuffer:
    capacity: int
    slots: list[Sample] = field(default_factory=list)
    seen_count: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.capacity <= 0:
            raise InvalidInputError("buffer capacity must be positive")

    def __len__(self) -> int:
        return len(self.slots)

    def is_empty(self) -> bool:
        return not self.slots

    def add(self, sample: Sample) -> None:
        if self.seen_count < self.capacity:
            self.slots.append(sample)
        else:
            j = int(self.rng.integers(0, self.seen_count + 1))
            if j < self.capacity:
                self.slots[j] = sample
        self.seen_count += 1

    def add_batch(self, images: torch.Tensor, labels: torch.Tensor, task_index: int) -> None:
        for x, y in zip(images, labels):
            self.add(Sample(int(y), x.clone(), task_index))

    def sample(self, n: int, rng: np.random.Generator | None = None) -> list[Sample]:
        return sample_replay_batch(self, n, rng if rng is not None else self.rng)

    def sample_tensors(self, n: int, rng: np.random.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        picked = self.sample(n, rng)
        return torch.stack([s.target for s in picked]), torch.tensor([s.condition for s in picked], dtype=torch.int64)

    def num_stored_values(self) -> int:
        return sum(s.target.numel() + 1 for s in self.slots)


def reservoir_update(buffer: ReplayBuffer, sample) -> ReplayBuffer:
    """Algorithm R: keep a uniform sample of everything streamed so far."""
    if not isinstance(sample, Sample):
        sample = Sample(*sample)
    buffer.add(sample)
    return buffer


def sample_replay_batch(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Sample]:
    if n == 0:
        return []
    if buffer.is_empty():
        raise EmptyBufferError("cannot draw replay samples from an empty buffer")
    idx = rng.integers(0, len(buffer.slots), size=n)
    return [buffer.slots[i] for i in idx]
