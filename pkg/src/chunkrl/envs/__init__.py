from __future__ import annotations

from .behavior import BehaviorPolicySpec, expert_policy, generate_dataset, markov_behavior_table
from .discrete import ChainEnv, DiscreteEnv, TabularEnv, TwoPhaseGridEnv
from .pointmass import PointMassEnv

ENV_KINDS = {"chain": ChainEnv, "grid": TwoPhaseGridEnv, "pointmass": PointMassEnv}


def make_env(kind: str, params: dict | None = None):
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown env kind {kind!r}; choose from {sorted(ENV_KINDS)}")
    params = dict(params or {})
    for key in ("start", "goal"):
        if key in params and params[key] is not None:
            params[key] = tuple(params[key])
    return ENV_KINDS[kind](**params)


__all__ = [
    "BehaviorPolicySpec",
    "ChainEnv",
    "DiscreteEnv",
    "ENV_KINDS",
    "PointMassEnv",
    "TabularEnv",
    "TwoPhaseGridEnv",
    "expert_policy",
    "generate_dataset",
    "make_env",
    "markov_behavior_table",
]
