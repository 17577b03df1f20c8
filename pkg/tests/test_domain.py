import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from clog.domain import (
    DEFAULT_LAMBDA_GRID,
    STRATEGY_IDS,
    ClassOrder,
    MetricDirection,
    RunConfig,
    TaskSequence,
    TaskSpec,
    build_task_sequence,
    class_orders_for,
    make_class_orders,
    published_class_orders,
)
from clog.errors import ConfigurationError, InvalidInputError


def test_order_one_is_natural():
    assert make_class_orders(10, 1, 7)[0].permutation == tuple(range(10))


def test_class_orders_are_deterministic():
    assert make_class_orders(3, 2, 11) == make_class_orders(3, 2, 11)


def test_zero_classes_rejected():
    with pytest.raises(InvalidInputError):
        make_class_orders(0, 5, 0)


@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31))
def test_generated_orders_are_permutations(n, k, seed):
    for order in make_class_orders(n, k, seed):
        assert sorted(order.permutation) == list(range(n))
        assert order.seed == seed


def test_published_mnist_order_two():
    orders = published_class_orders()["mnist"]
    assert orders[1].permutation == (3, 9, 1, 8, 0, 2, 6, 4, 5, 7)
    assert orders[0].permutation == tuple(range(10))
    assert len(orders) == 5


def test_fixture_schema():
    for dataset_id, orders in published_class_orders().items():
        assert len(orders) == 5, dataset_id
        for order in orders:
            assert sorted(order.permutation) == list(range(order.num_classes))


def test_orders_fall_back_to_generated_shuffles():
    orders = class_orders_for("imagenet64", 1000, seed=3)
    assert len(orders) == 5 and orders[0].permutation == tuple(range(1000))
    with pytest.raises(InvalidInputError):
        class_orders_for("mnist", 12)


@pytest.mark.parametrize("n, k, tasks", [(10, 2, 5), (1000, 50, 20), (2, 2, 1)])
def test_task_counts(n, k, tasks):
    seq = build_task_sequence(ClassOrder(1, tuple(range(n))), k)
    assert len(seq) == tasks


def test_non_divisible_split_names_both_values():
    with pytest.raises(ConfigurationError, match="classes_per_task=3.*num_classes=10"):
        build_task_sequence(ClassOrder(1, tuple(range(10))), 3)


@given(st.permutations(list(range(12))), st.sampled_from([1, 2, 3, 4, 6, 12]))
def test_sequence_partitions_the_order(perm, k):
    seq = build_task_sequence(ClassOrder(2, tuple(perm)), k)
    assert seq.classes == tuple(perm)
    sets = [set(t.class_labels) for t in seq]
    assert set().union(*sets) == set(range(12))
    assert sum(len(s) for s in sets) == 12


def test_domain_type_invariants():
    with pytest.raises(InvalidInputError):
        TaskSpec(0, ())
    with pytest.raises(InvalidInputError):
        TaskSpec(0, (1, 1))
    with pytest.raises(InvalidInputError):
        ClassOrder(1, (0, 2))
    with pytest.raises(InvalidInputError):
        TaskSequence((TaskSpec(0, (0, 1)), TaskSpec(1, (1, 2))), "x", 1)
    with pytest.raises(InvalidInputError):
        TaskSequence((TaskSpec(0, (0,)), TaskSpec(0, (1,))), "x", 1)


def test_metric_direction():
    assert MetricDirection.LOWER_BETTER.better(1.0, 2.0)
    assert MetricDirection.HIGHER_BETTER.better(2.0, 1.0)
    assert not MetricDirection.LOWER_BETTER.better(1.0, 1.0)


def test_run_config_validation():
    RunConfig("mnist", 2)
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, strategy_id="nope")
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, backbone_kind="vae")
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, train_steps_per_task=100, eval_interval_steps=500)
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, batch_size=8, replay_batch_size=16)
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, class_order_ids=[6])
    with pytest.raises(ConfigurationError):
        RunConfig("mnist", 2, grid=[0.1] * 9)


def test_run_config_json_round_trip(tmp_path):
    cfg = RunConfig("mnist", 2, strategy_id="ewc", strategy_hyperparams={"lambda": 10.0})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.from_json(path) == cfg


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="bogus"):
        RunConfig.from_dict({"dataset_id": "mnist", "classes_per_task": 2, "bogus": 1})


def test_constants():
    assert len(STRATEGY_IDS) == 12
    assert DEFAULT_LAMBDA_GRID == (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)
