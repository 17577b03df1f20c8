import numpy as np
import pytest
import torch

from clog.backbones import BackboneSpec, build_backbone
from clog.data_stream import TaskData, partition_by_task
from clog.datasets import make_shapes8
from clog.domain import ClassOrder, RunConfig, build_task_sequence


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def shapes8_small():
    return make_shapes8(per_class=40, seed=3)


@pytest.fixture
def two_tasks(shapes8_small):
    sequence = build_task_sequence(ClassOrder(1, (0, 1, 2, 3)), 2, "shapes8")
    return partition_by_task(shapes8_small, sequence)


@pytest.fixture
def diffusion_spec():
    return BackboneSpec("diffusion", channels=1, resolution=8, num_classes=4, width=8, diffusion_steps=50, sampler_steps=5)


@pytest.fixture
def gan_spec():
    return BackboneSpec("gan", channels=1, resolution=8, num_classes=4, width=8, latent_dim=8)


@pytest.fixture
def tiny_diffusion(diffusion_spec):
    return build_backbone(diffusion_spec, 0)


@pytest.fixture
def tiny_gan(gan_spec):
    return build_backbone(gan_spec, 0)


def tiny_config(**overrides) -> RunConfig:
    base = dict(
        dataset_id="shapes8",
        classes_per_task=2,
        train_steps_per_task=6,
        eval_interval_steps=3,
        sampler_steps=3,
        batch_size=8,
        replay_batch_size=4,
        n_gen=24,
        width=8,
        diffusion_steps=50,
        feature_dim=8,
        class_order_ids=[1],
    )
    base.update(overrides)
    return RunConfig(**base)


def make_task_data(task_index, classes, n_per_class=6, seed=0):
    from clog.domain import TaskSpec

    g = torch.Generator().manual_seed(seed)
    labels = torch.tensor([c for c in classes for _ in range(n_per_class)])
    images = torch.rand((len(labels), 1, 8, 8), generator=g) * 2 - 1
    return TaskData(TaskSpec(task_index, tuple(classes)), images, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
