"""Experiment orchestration: task-by-task training, evaluation and aggregation.

A *cell* is one full pass over a task sequence for one class order and one
hyperparameter value. Every random stream in a cell is derived from
``(config.seed, order_id, grid_index)`` so cells are independent and
reproducible, and evaluation draws depend only on the task being evaluated:
re-evaluating an unchanged model always yields the same number.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from clog.backbones.base import GenerativeBackbone, make_optimizers, optimization_step
from clog.backbones.factory import build_backbone, spec_from_config
from clog.data_stream import BatchSampler, TaskData, partition_by_task
from clog.datasets import load_dataset
from clog.domain import (
    DEFAULT_LAMBDA_GRID,
    MAX_GRID_SIZE,
    BackboneKind,
    ClassOrder,
    MetricDirection,
    RunConfig,
    TaskSequence,
    build_task_sequence,
    class_orders_for,
)
from clog.errors import ConfigurationError, DivergenceError, QualityError
from clog.metrics import NA, EvalReport, MetricMatrix, RandomConvEmbedder, aggregate_orders, quality
from clog.strategies import Strategy, StrategyConfig, make_strategy, noncl_pool

log = logging.getLogger(__name__)

DEFAULT_LR = {BackboneKind.DIFFUSION: 2e-3, BackboneKind.GAN: 2e-3}

# (model view, task index) -> quality value (lower is better for FID)
QualityFn = Callable[[GenerativeBackbone, int], float]


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def learning_rate(config: RunConfig) -> float:
    return config.learning_rate if config.learning_rate is not None else DEFAULT_LR[config.kind]


# -- data and evaluation context -----------------------------------------------------


@dataclass
class SequenceContext:
    """Everything a cell needs besides the strategy: tasks, data and the evaluator."""

    config: RunConfig
    order: ClassOrder
    task_data: list[TaskData]
    spec: object
    extractor: RandomConvEmbedder
    references: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.task_data)

    def ensure_reference(self, task_index: int) -> np.ndarray:
        """Embed the task's real images once; kept for evaluation after the data is closed."""
        if task_index not in self.references:
            self.references[task_index] = self.extractor.embed(self.task_data[task_index].images)
        return self.references[task_index]

    def quality_fn(self, grid_index: int = 0) -> QualityFn:
        config, order = self.config, self.order

        def evaluate(model: GenerativeBackbone, task_index: int) -> float:
            generator = torch.Generator().manual_seed(derive_seed(config.seed, order.order_id, grid_index, "eval", task_index))
            return quality(
                model,
                self.task_data[task_index].task,
                self.references[task_index],
                config.n_gen,
                self.extractor,
                generator,
                steps=config.sampler_steps,
            )

        return evaluate


def prepare_context(config: RunConfig, order: ClassOrder, dataset=None) -> SequenceContext:
    dataset = dataset if dataset is not None else load_dataset(config.dataset_id, config.data_root)
    sequence = build_task_sequence(order, config.classes_per_task, dataset.dataset_id)
    parts = partition_by_task(dataset, sequence)
    height, width = dataset.resolution
    if height != width:
        raise ConfigurationError(f"backbones need square images, got {height}x{width}")
    spec = spec_from_config(config, dataset.channels, height, dataset.num_classes)
    extractor = RandomConvEmbedder(dataset.channels, config.feature_dim, config.extractor_seed)
    return SequenceContext(config, order, parts, spec, extractor)


def resolve_order(config: RunConfig, order_id: int, num_classes: int) -> ClassOrder:
    for order in class_orders_for(config.dataset_id, num_classes, config.seed):
        if order.order_id == order_id:
            return order
    raise ConfigurationError(f"no class order {order_id} for {config.dataset_id!r}")


# -- one task ------------------------------------------------------------------------


@dataclass
class TrainState:
    generator: torch.Generator
    trace: list[tuple[int, float]] = field(default_factory=list)
    diverged: bool = False
    losses: dict[str, float] = field(default_factory=dict)


def train_task(
    backbone: GenerativeBackbone,
    strategy: Strategy,
    task_data: TaskData,
    config: RunConfig,
    state: TrainState,
    quality_fn: Callable[[GenerativeBackbone], float],
    steps: int | None = None,
) -> tuple[GenerativeBackbone, TrainState, int | None]:
    """Train on one task, evaluating every ``eval_interval_steps``; keep the best checkpoint.

    ``quality_fn`` scores the current-task model view (lower is better). On
    divergence the task is flagged in ``state.diverged`` and the best
    checkpoint so far (or the pre-task weights) is restored.
    """
    steps = steps or config.train_steps_per_task
    task_index = strategy.task_index
    optimizers = make_optimizers(backbone, learning_rate(config), lambda ph: strategy.trainable_parameters(backbone, ph))
    sampler = BatchSampler(task_data, config.batch_size, state.generator)
    backbone.train()

    best_value, best_step = math.inf, None
    best_state = copy.deepcopy(backbone.state_dict())
    state.trace = []
    state.diverged = False
    for step in range(1, steps + 1):
        images, labels = sampler.next()
        images, labels = strategy.compose_batch(images, labels)
        strategy.before_step(backbone)
        try:
            state.losses = optimization_step(
                backbone,
                images,
                labels,
                optimizers,
                state.generator,
                aux_loss=lambda phase: strategy.auxiliary_loss(backbone, phase, images, labels),
                transform_gradient=lambda phase, params, flat: strategy.transform_gradient(backbone, phase, params, flat),
                step=step,
            )
        except DivergenceError as err:
            log.warning("task %d diverged at step %d: %s", task_index, err.step, err)
            state.diverged = True
            break
        strategy.after_step(backbone)
        if step % config.eval_interval_steps == 0 or step == steps:
            try:
                value = float(quality_fn(strategy.select_model(task_index, backbone)))
            except QualityError:
                value = NA
            backbone.train()
            state.trace.append((step, value))
            if value < best_value:
                best_value, best_step = value, step
                best_state = copy.deepcopy(backbone.state_dict())
    backbone.load_state_dict(best_state)
    if best_step is None:
        state.diverged = True
    return backbone, state, best_step


# -- one class order -------------------------------------------------------------------


@dataclass
class SequenceResult:
    order_id: int
    matrix: MetricMatrix
    best_steps: list[int | None]
    wall_times: list[float]
    stored_values: list[int]
    traces: list[list[tuple[int, float]]]
    decisions: dict
    checkpoint_ids: list[str]
    backbone: GenerativeBackbone | None = None  # live model at the end, not persisted
    strategy: Strategy | None = None


def _save_state(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_resume_state(token) -> dict:
    return torch.load(token, weights_only=False)


def run_sequence(
    config: RunConfig,
    order: ClassOrder,
    grid_index: int = 0,
    context: SequenceContext | None = None,
    quality_fn: QualityFn | None = None,
    checkpoint_dir=None,
    resume=None,
    stop_after: int | None = None,
) -> SequenceResult:
    """Learn the tasks of ``order`` one after another and fill the metric matrix.

    After task t every model view ``select_model(i)`` for i <= t is scored on
    task i. The raw data of a task is closed as soon as the strategy has seen
    its end, so later code can only reach it through a replay buffer.
    ``stop_after`` ends the cell early after that many tasks (used to test
    resumption); ``resume`` is a token written to ``checkpoint_dir``.
    """
    context = context or prepare_context(config, order)
    cell_seed = derive_seed(config.seed, order.order_id, grid_index)
    T = context.num_tasks
    own_quality = quality_fn is None
    quality_fn = quality_fn or context.quality_fn(grid_index)
    strategy_config = StrategyConfig.from_hyperparams(config.strategy_hyperparams, config.replay_batch_size)

    matrix = MetricMatrix(T, MetricDirection.LOWER_BETTER, "fid", context.extractor.extractor_id)
    result = SequenceResult(order.order_id, matrix, [], [], [], [], {}, [])
    start_task = 0
    if resume is not None:
        saved = load_resume_state(resume)
        if saved["order_id"] != order.order_id or saved["config"] != config.to_dict() or saved["grid_index"] != grid_index:
            raise ConfigurationError("resume token belongs to a different run")
        backbone, strategy = saved["backbone"], saved["strategy"]
        generator = torch.Generator()
        generator.set_state(saved["generator"])
        for t, row in enumerate(saved["rows"]):
            matrix.set_row(t, row)
        for name in ("best_steps", "wall_times", "stored_values", "traces", "checkpoint_ids"):
            setattr(result, name, list(saved[name]))
        start_task = saved["tasks_done"]
        for t in range(start_task):
            if own_quality:
                context.ensure_reference(t)  # finished tasks are still evaluated
            context.task_data[t].close()
    else:
        backbone = build_backbone(context.spec, derive_seed(cell_seed, "init"))
        strategy = make_strategy(config.strategy_id, strategy_config, derive_seed(cell_seed, "strategy"))
        generator = torch.Generator().manual_seed(derive_seed(cell_seed, "train"))
    state = TrainState(generator)

    if strategy.pooled:
        backbone = _run_pooled(config, context, strategy, backbone, state, quality_fn, own_quality, result)
    else:
        for t in range(start_task, T):
            if stop_after is not None and t >= stop_after:
                break
            backbone = _run_task(config, context, strategy, t, backbone, state, quality_fn, own_quality, result)
            if checkpoint_dir is not None:
                payload = {
                    "order_id": order.order_id,
                    "grid_index": grid_index,
                    "config": config.to_dict(),
                    "tasks_done": t + 1,
                    "backbone": backbone,
                    "strategy": strategy,
                    "generator": state.generator.get_state(),
                    "rows": [matrix.row(i).tolist() for i in range(t + 1)],
                    "best_steps": result.best_steps,
                    "wall_times": result.wall_times,
                    "stored_values": result.stored_values,
                    "traces": result.traces,
                    "checkpoint_ids": result.checkpoint_ids,
                }
                _save_state(Path(checkpoint_dir) / f"order{order.order_id}_grid{grid_index}_task{t + 1}.pt", payload)
    result.backbone, result.strategy = backbone, strategy
    result.decisions.update(strategy.decisions())
    result.decisions["strategy_seed"] = derive_seed(cell_seed, "strategy")
    result.decisions["init_seed"] = derive_seed(cell_seed, "init")
    return result


def _row_values(row_fn, count: int) -> list[float]:
    values = []
    for i in range(count):
        try:
            values.append(float(row_fn(i)))
        except QualityError:
            values.append(NA)
    return values


def _run_task(config, context, strategy, t, backbone, state, quality_fn, own_quality, result) -> GenerativeBackbone:
    task_data = context.task_data[t]
    started = time.perf_counter()
    backbone = strategy.on_task_start(t, task_data.task, backbone)
    if own_quality:
        context.ensure_reference(t)
    backbone, state, best_step = train_task(
        backbone, strategy, task_data, config, state, lambda model: quality_fn(model, t)
    )
    strategy.on_task_end(t, backbone, task_data)
    task_data.close()
    wall = time.perf_counter() - started

    row = _row_values(lambda i: quality_fn(strategy.select_model(i, backbone), i), t + 1)
    diverged_tasks = {i for i, s in enumerate(result.best_steps) if s is None}
    if state.diverged:
        diverged_tasks.add(t)
    row = [NA if i in diverged_tasks else v for i, v in enumerate(row)]
    result.matrix.set_row(t, row)
    result.best_steps.append(None if state.diverged else best_step)
    result.wall_times.append(wall)
    result.stored_values.append(int(strategy.stored_values(backbone)))
    result.traces.append(list(state.trace))
    result.checkpoint_ids.append(f"order{context.order.order_id}/task{t}/step{best_step}")
    return backbone


def _run_pooled(config, context, strategy, backbone, state, quality_fn, own_quality, result) -> GenerativeBackbone:
    """Non-CL: one model on the union of all tasks for T times the per-task budget."""
    T = context.num_tasks
    started = time.perf_counter()
    sequence = TaskSequence([d.task for d in context.task_data], context.config.dataset_id, context.order.order_id)
    if own_quality:
        for i in range(T):
            context.ensure_reference(i)
    pooled = noncl_pool(sequence, context.task_data)
    backbone = strategy.on_task_start(0, pooled.task, backbone)

    def mean_quality(model):
        return float(np.mean([quality_fn(model, i) for i in range(T)]))

    backbone, state, best_step = train_task(
        backbone, strategy, pooled, config, state, mean_quality, steps=T * config.train_steps_per_task
    )
    strategy.on_task_end(0, backbone, pooled)
    pooled.close()
    for d in context.task_data:
        d.close()
    wall = time.perf_counter() - started
    values = _row_values(lambda i: quality_fn(backbone, i), T)
    if state.diverged:
        values = [NA] * T
    for t in range(T):
        result.matrix.set_row(t, values[: t + 1])
        result.best_steps.append(None if state.diverged else best_step)
        result.wall_times.append(wall / T)
        result.stored_values.append(int(strategy.stored_values(backbone)))
        result.traces.append(list(state.trace) if t == 0 else [])
        result.checkpoint_ids.append(f"order{context.order.order_id}/pooled/step{best_step}")
    result.decisions["pooled_steps"] = T * config.train_steps_per_task
    return backbone


# -- grid search and benchmark ------------------------------------------------------------


def grid_values(config: RunConfig, strategy_id: str | None = None) -> tuple[str | None, list[float]]:
    """(hyperparameter name, values) searched for this config; ``(None, [])`` when nothing to search."""
    from clog.strategies import REGISTRY

    param = config.grid_param or REGISTRY[strategy_id or config.strategy_id].grid_param
    if param is None:
        return None, []
    if config.grid is not None:
        values = list(config.grid)
    elif param in config.strategy_hyperparams:
        return param, []
    else:
        values = list(DEFAULT_LAMBDA_GRID)
    if not 1 <= len(values) <= MAX_GRID_SIZE:
        raise ConfigurationError(f"grid must hold between 1 and {MAX_GRID_SIZE} values")
    return param, values


def choose_grid_value(values: Sequence[float], afqs: Sequence[float], direction=MetricDirection.LOWER_BETTER) -> float:
    """Best AFQ wins; ties go to the smaller value; NA entries never win."""
    best = None
    for value, score in sorted(zip(values, afqs), key=lambda vs: vs[0]):
        if math.isnan(score):
            continue
        if best is None or direction.better(score, best[1]):
            best = (value, score)
    if best is None:
        raise ConfigurationError("every grid value produced NA")
    return best[0]


@dataclass
class GridResult:
    param: str
    values: list[float]
    afqs: list[float]
    chosen: float
    chosen_index: int
    results: list[SequenceResult]


def grid_search(config: RunConfig, order: ClassOrder | None = None, context_factory=None, quality_fn=None) -> GridResult:
    """Run the whole sequence once per grid value on one order and keep the best AFQ."""
    param, values = grid_values(config)
    if param is None or not values:
        raise ConfigurationError(f"strategy {config.strategy_id!r} has no hyperparameter grid to search")
    if order is None:
        order = _orders_for(config, [1])[0]
    results, afqs = [], []
    for index, value in enumerate(values):
        cfg = config.with_hyperparam(param, value)
        context = context_factory(cfg, order) if context_factory else prepare_context(cfg, order)
        res = run_sequence(cfg, order, grid_index=index, context=context, quality_fn=quality_fn)
        results.append(res)
        afqs.append(EvalReport.from_matrix(res.matrix).afq)
    chosen = choose_grid_value(values, afqs)
    return GridResult(param, values, afqs, chosen, values.index(chosen), results)


def _orders_for(config: RunConfig, order_ids: Sequence[int]) -> list[ClassOrder]:
    from clog.datasets import dataset_info

    num_classes = dataset_info(config.dataset_id).num_classes
    return [resolve_order(config, k, num_classes) for k in order_ids]


@dataclass
class ResultBundle:
    config: dict
    matrices: dict[int, MetricMatrix]
    reports: dict[int, EvalReport]
    aggregate: EvalReport | None
    best_steps: dict[int, list]
    wall_times: dict[int, list[float]]
    stored_values: dict[int, list[int]]
    checkpoint_ids: dict[int, list[str]]
    decisions: dict
    incomplete_orders: list[int] = field(default_factory=list)

    @property
    def strategy_id(self) -> str:
        return self.config["strategy_id"]

    def content(self) -> dict:
        """Deterministic content (wall times excluded)."""
        return {
            "config": self.config,
            "matrices": {str(k): m.to_json() for k, m in sorted(self.matrices.items())},
            "reports": {str(k): r.to_json() for k, r in sorted(self.reports.items())},
            "aggregate": self.aggregate.to_json() if self.aggregate else None,
            "best_steps": {str(k): v for k, v in sorted(self.best_steps.items())},
            "stored_values": {str(k): v for k, v in sorted(self.stored_values.items())},
            "checkpoint_ids": {str(k): v for k, v in sorted(self.checkpoint_ids.items())},
            "decisions": self.decisions,
            "incomplete_orders": self.incomplete_orders,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def run_id(self) -> str:
        cfg = self.config
        digest = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:8]
        return f"{cfg['dataset_id']}-{cfg['backbone_kind']}-{cfg['strategy_id']}-{digest}"

    def save(self, root) -> Path:
        from clog.report import write_bundle_tables

        out = Path(root)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", self.config)
        for k, m in self.matrices.items():
            _dump(out / f"matrix_order{k}.json", m.to_json())
        _dump(
            out / "report.json",
            {
                "content_hash": self.content_hash(),
                "aggregate": self.aggregate.to_json() if self.aggregate else None,
                "per_order": {str(k): r.to_json() for k, r in self.reports.items()},
                "best_steps": {str(k): v for k, v in self.best_steps.items()},
                "wall_times": {str(k): v for k, v in self.wall_times.items()},
                "stored_values": {str(k): v for k, v in self.stored_values.items()},
                "checkpoint_ids": {str(k): v for k, v in self.checkpoint_ids.items()},
                "decisions": self.decisions,
                "incomplete_orders": self.incomplete_orders,
            },
        )
        write_bundle_tables([self], out)
        return out

    @classmethod
    def load(cls, root) -> "ResultBundle":
        root = Path(root)
        config = json.loads((root / "config.json").read_text())
        doc = json.loads((root / "report.json").read_text())
        matrices = {}
        for path in sorted(root.glob("matrix_order*.json")):
            k = int(path.stem.removeprefix("matrix_order"))
            matrices[k] = MetricMatrix.from_json(json.loads(path.read_text()))
        reports = {int(k): EvalReport.from_json(v) for k, v in doc["per_order"].items()}
        intkeys = lambda d: {int(k): v for k, v in d.items()}  # noqa: E731
        return cls(
            config,
            matrices,
            reports,
            EvalReport.from_json(doc["aggregate"]) if doc["aggregate"] else None,
            intkeys(doc["best_steps"]),
            intkeys(doc["wall_times"]),
            intkeys(doc["stored_values"]),
            intkeys(doc["checkpoint_ids"]),
            doc["decisions"],
            doc["incomplete_orders"],
        )


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(type(obj))


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=False))


def _run_cell(args) -> SequenceResult:
    config, order, grid_index, checkpoint_dir, resume = args
    return run_sequence(config, order, grid_index, checkpoint_dir=checkpoint_dir, resume=resume)


def run_benchmark(
    config: RunConfig,
    order_ids: Sequence[int] | None = None,
    quality_fn: QualityFn | None = None,
    context_factory=None,
    output_dir=None,
    resume: dict[int, str] | None = None,
    workers: int = 1,
) -> ResultBundle:
    """Grid search (if the strategy has an unset weight), then one cell per class order.

    Orders whose cell raises are listed in ``incomplete_orders`` and left out
    of the aggregate.
    """
    order_ids = list(order_ids or config.class_order_ids)
    orders = _orders_for(config, order_ids)
    decisions: dict = {
        "extractor_seed": config.extractor_seed,
        "orders": order_ids,
        "class_orders": {str(o.order_id): list(o.permutation) for o in orders},
    }
    grid_index, reuse = 0, {}
    param, values = grid_values(config)
    if values:
        search_order = _orders_for(config, [1])[0]
        grid = grid_search(config, search_order, context_factory, quality_fn)
        config = config.with_hyperparam(param, grid.chosen)
        grid_index = grid.chosen_index
        reuse[1] = grid.results[grid.chosen_index]
        decisions["grid"] = {"param": param, "values": values, "afq": grid.afqs, "chosen": grid.chosen}
    run_dir = None
    bundle_stub = ResultBundle(config.to_dict(), {}, {}, None, {}, {}, {}, {}, {})
    if output_dir is not None:
        run_dir = Path(output_dir) / bundle_stub.run_id
        checkpoint_dir = run_dir / "state"
    else:
        checkpoint_dir = None
    resume = resume or {}

    results: dict[int, SequenceResult] = {}
    incomplete: list[int] = []
    pending = [o for o in orders if o.order_id not in reuse]
    for k, res in reuse.items():
        if k in order_ids:
            results[k] = res
    if workers > 1 and quality_fn is None and context_factory is None and pending:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            jobs = [(config, o, grid_index, checkpoint_dir, resume.get(o.order_id)) for o in pending]
            for order, fut in zip(pending, [pool.submit(_run_cell, j) for j in jobs]):
                try:
                    results[order.order_id] = fut.result()
                except Exception as err:  # noqa: BLE001
                    log.error("order %d failed: %s", order.order_id, err)
                    incomplete.append(order.order_id)
    else:
        for order in pending:
            try:
                context = context_factory(config, order) if context_factory else None
                results[order.order_id] = run_sequence(
                    config,
                    order,
                    grid_index,
                    context=context,
                    quality_fn=quality_fn,
                    checkpoint_dir=checkpoint_dir,
                    resume=resume.get(order.order_id),
                )
            except (ConfigurationError, KeyboardInterrupt):
                raise
            except Exception as err:  # noqa: BLE001
                log.error("order %d failed: %s", order.order_id, err)
                incomplete.append(order.order_id)

    bundle = bundle_stub
    for k in sorted(results):
        res = results[k]
        bundle.matrices[k] = res.matrix
        bundle.reports[k] = EvalReport.from_matrix(res.matrix, order_id=k)
        bundle.best_steps[k] = res.best_steps
        bundle.wall_times[k] = res.wall_times
        bundle.stored_values[k] = res.stored_values
        bundle.checkpoint_ids[k] = res.checkpoint_ids
        decisions.setdefault("per_order", {})[str(k)] = res.decisions
    if bundle.reports:
        bundle.aggregate = aggregate_orders(list(bundle.reports.values()))
    bundle.decisions = decisions
    bundle.incomplete_orders = sorted(incomplete)
    if run_dir is not None:
        bundle.save(run_dir)
    return bundle
