"""Continual-learning strategies and their registry."""

from __future__ import annotations

from typing import Any, Mapping

from clog.domain import STRATEGY_IDS
from clog.errors import ConfigurationError
from clog.strategies.base import Strategy, StrategyConfig
from clog.strategies.isolation import CLoRA, Ensemble, NonCL, noncl_pool
from clog.strategies.penalties import (
    agem_project,
    ewc_compute_fisher,
    ewc_penalty,
    kd_loss,
    l2_penalty,
    mas_importance,
    si_accumulate,
    si_consolidate,
)
from clog.strategies.regularization import EWC, L2, MAS, SI, KnowledgeDistillation
from clog.strategies.replay import AGEM, ExperienceReplay, GenerativeReplay

REGISTRY: dict[str, type[Strategy]] = {
    "ncl": Strategy,
    "noncl": NonCL,
    "ensemble": Ensemble,
    "er": ExperienceReplay,
    "gr": GenerativeReplay,
    "kd": KnowledgeDistillation,
    "l2": L2,
    "ewc": EWC,
    "si": SI,
    "mas": MAS,
    "agem": AGEM,
    "clora": CLoRA,
}
assert set(REGISTRY) == set(STRATEGY_IDS)


def make_strategy(strategy_id: str, config: StrategyConfig | Mapping[str, Any] | None = None, seed: int = 0) -> Strategy:
    if strategy_id not in REGISTRY:
        raise ConfigurationError(f"unknown strategy {strategy_id!r}; expected one of {sorted(REGISTRY)}")
    if config is None or isinstance(config, Mapping):
        config = StrategyConfig.from_hyperparams(config or {})
    return REGISTRY[strategy_id](config, seed)


def ncl_hooks() -> Strategy:
    return Strategy()


def ensemble_hooks(seed: int = 0) -> Ensemble:
    return Ensemble(seed=seed)


def er_hooks(buffer_capacity: int = 200, replay_batch_size: int = 16, seed: int = 0) -> ExperienceReplay:
    return ExperienceReplay(StrategyConfig(buffer_capacity=buffer_capacity, replay_batch_size=replay_batch_size), seed)


def gr_hooks(replay_batch_size: int = 16, seed: int = 0) -> GenerativeReplay:
    return GenerativeReplay(StrategyConfig(replay_batch_size=replay_batch_size), seed)


def clora_hooks(rank: int = 2, seed: int = 0) -> CLoRA:
    return CLoRA(StrategyConfig(lora_rank=rank), seed)


__all__ = [
    "AGEM", "CLoRA", "EWC", "Ensemble", "ExperienceReplay", "GenerativeReplay", "KnowledgeDistillation",
    "L2", "MAS", "NonCL", "REGISTRY", "SI", "Strategy", "StrategyConfig",
    "agem_project", "clora_hooks", "ensemble_hooks", "er_hooks", "ewc_compute_fisher", "ewc_penalty",
    "gr_hooks", "kd_loss", "l2_penalty", "make_strategy", "mas_importance", "ncl_hooks", "noncl_pool",
    "si_accumulate", "si_consolidate",
]
