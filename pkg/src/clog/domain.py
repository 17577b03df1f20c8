"""Core vocabulary: tasks, class orders, metric direction and run configuration."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

import numpy as np

from clog.errors import ConfigurationError, InvalidInputError

STRATEGY_IDS = (
    "ncl",
    "noncl",
    "ensemble",
    "er",
    "gr",
    "kd",
    "l2",
    "ewc",
    "si",
    "mas",
    "agem",
    "clora",
)

# Regularization-weight search grid, one value per order of magnitude.
DEFAULT_LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)
MAX_GRID_SIZE = 8


class MetricDirection(str, enum.Enum):
    LOWER_BETTER = "lower_better"
    HIGHER_BETTER = "higher_better"

    def better(self, a: float, b: float) -> bool:
        """True when ``a`` is strictly better than ``b``."""
        if self is MetricDirection.LOWER_BETTER:
            return a < b
        return a > b


class BackboneKind(str, enum.Enum):
    DIFFUSION = "diffusion"
    GAN = "gan"


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    class_labels: tuple[int, ...]
    description: str = ""

    def __post_init__(self):
        labels = tuple(int(c) for c in self.class_labels)
        if not labels:
            raise InvalidInputError(f"task {self.task_index} has no classes")
        if len(set(labels)) != len(labels):
            raise InvalidInputError(f"task {self.task_index} repeats a class: {labels}")
        object.__setattr__(self, "class_labels", labels)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[TaskSpec, ...]
    dataset_id: str
    class_order_id: int

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        indices = [t.task_index for t in self.tasks]
        if len(set(indices)) != len(indices):
            raise InvalidInputError(f"duplicate task indices: {indices}")
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen.intersection(task.class_labels)
            if overlap:
                raise InvalidInputError(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(task.class_labels)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskSpec:
        return self.tasks[i]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(c for task in self.tasks for c in task.class_labels)


@dataclass(frozen=True)
class ClassOrder:
    order_id: int
    permutation: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        perm = tuple(int(c) for c in self.permutation)
        if sorted(perm) != list(range(len(perm))):
            raise InvalidInputError(f"class order {self.order_id} is not a permutation of 0..{len(perm) - 1}")
        object.__setattr__(self, "permutation", perm)

    @property
    def num_classes(self) -> int:
        return len(self.permutation)


def make_class_orders(num_classes: int, num_orders: int, seed: int) -> list[ClassOrder]:
    """Order 1 is the natural ordering; orders 2.. are seeded shuffles."""
    if num_classes <= 0:
        raise InvalidInputError("num_classes must be positive")
    if num_orders < 1:
        raise InvalidInputError("num_orders must be at least 1")
    rng = np.random.default_rng(seed)
    orders = [ClassOrder(1, tuple(range(num_classes)), seed)]
    for order_id in range(2, num_orders + 1):
        orders.append(ClassOrder(order_id, tuple(int(c) for c in rng.permutation(num_classes)), seed))
    return orders


def build_task_sequence(
    class_order: ClassOrder, classes_per_task: int, dataset_id: str = ""
) -> TaskSequence:
    n = class_order.num_classes
    if classes_per_task <= 0 or n % classes_per_task:
        raise ConfigurationError(
            f"classes_per_task={classes_per_task} does not divide num_classes={n}"
        )
    perm = class_order.permutation
    tasks = tuple(
        TaskSpec(i, perm[i * classes_per_task : (i + 1) * classes_per_task])
        for i in range(n // classes_per_task)
    )
    return TaskSequence(tasks, dataset_id, class_order.order_id)


# -- class-order fixture ----------------------------------------------------


def _fixture() -> dict[str, list[list[int]]]:
    text = resources.files("clog.fixtures").joinpath("class_orders.json").read_text()
    data = json.loads(text)
    for dataset_id, orders in data.items():
        if len(orders) != 5:
            raise InvalidInputError(f"fixture for {dataset_id} must hold exactly 5 orders")
    return data


def published_class_orders() -> dict[str, list[ClassOrder]]:
    return {
        dataset_id: [ClassOrder(i + 1, tuple(p)) for i, p in enumerate(orders)]
        for dataset_id, orders in _fixture().items()
    }


def class_orders_for(dataset_id: str, num_classes: int, seed: int = 0) -> list[ClassOrder]:
    """Fixture orders when the dataset has them, otherwise seeded shuffles."""
    fixture = published_class_orders()
    if dataset_id in fixture:
        orders = fixture[dataset_id]
        if orders[0].num_classes != num_classes:
            raise InvalidInputError(
                f"fixture orders for {dataset_id} cover {orders[0].num_classes} classes, expected {num_classes}"
            )
        return orders
    return make_class_orders(num_classes, 5, seed)


# -- run configuration ------------------------------------------------------


@dataclass
class RunConfig:
    dataset_id: str
    classes_per_task: int
    backbone_kind: str = "diffusion"
    strategy_id: str = "ncl"
    strategy_hyperparams: dict[str, float] = field(default_factory=dict)
    train_steps_per_task: int = 2000
    eval_interval_steps: int = 500
    sampler_steps: int = 50
    batch_size: int = 64
    replay_batch_size: int = 16
    seed: int = 0
    class_order_ids: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    # desk-scale extensions
    learning_rate: float | None = None
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 16
    latent_dim: int = 32
    r1_gamma: float = 0.01
    n_gen: int = 500
    feature_dim: int = 64
    extractor_seed: int = 0
    data_root: str | None = None
    output_dir: str = "results"
    grid: list[float] | None = None
    grid_param: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy_id not in STRATEGY_IDS:
            raise ConfigurationError(f"unknown strategy_id {self.strategy_id!r}; expected one of {STRATEGY_IDS}")
        try:
            BackboneKind(self.backbone_kind)
        except ValueError:
            raise ConfigurationError(f"unknown backbone_kind {self.backbone_kind!r}") from None
        for name in ("classes_per_task", "train_steps_per_task", "eval_interval_steps", "sampler_steps", "batch_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.eval_interval_steps > self.train_steps_per_task:
            raise ConfigurationError("eval_interval_steps must not exceed train_steps_per_task")
        if not 0 <= self.replay_batch_size <= self.batch_size:
            raise ConfigurationError("replay_batch_size must lie in [0, batch_size]")
        if not self.class_order_ids or not set(self.class_order_ids) <= {1, 2, 3, 4, 5}:
            raise ConfigurationError("class_order_ids must be a non-empty subset of {1..5}")
        if self.grid is not None and not 1 <= len(self.grid) <= MAX_GRID_SIZE:
            raise ConfigurationError(f"grid must hold between 1 and {MAX_GRID_SIZE} values")

    @property
    def kind(self) -> BackboneKind:
        return BackboneKind(self.backbone_kind)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(data))

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_hyperparam(self, name: str, value: float) -> "RunConfig":
        params = dict(self.strategy_hyperparams)
        params[name] = value
        return self.replace(strategy_hyperparams=params)


def ensure_sequence_covers(sequence: TaskSequence, class_ids: Sequence[int]) -> None:
    missing = set(class_ids) - set(sequence.classes)
    if missing:
        raise InvalidInputError(f"task sequence misses classes {sorted(missing)}")
