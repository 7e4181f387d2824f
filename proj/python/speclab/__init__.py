"""Desk-scale speculative decoding laboratory.

Training (target LM, multi-step draft alignment, lm-head router), lossless
chain/tree drafting-verification, and the accompanying analytics, backed by
the C++ core.
"""

from ._core import (
    ConfigError,
    ContractError,
    CycleRecord,
    DataError,
    DependencyError,
    DraftMode,
    DraftModel,
    EngineConfig,
    Metrics,
    ModelConfig,
    RouterHead,
    TargetModel,
    TrainConfig,
    acceptance_length,
    acceptance_rates,
    count_draft_params,
    count_router_params,
    count_target_params,
    cross_step_infonce,
    generate,
    grouped_head_prob,
    latency_ratio_estimate,
    load_draft,
    load_router,
    load_target,
    markov_corpus,
    measured_speedup,
    pretrain_target,
    router_forward,
    save_draft,
    save_router,
    save_target,
    speedup_from_latency,
    speedup_from_params,
    target_forward,
    train_draft,
    train_router,
    vanilla_generate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
