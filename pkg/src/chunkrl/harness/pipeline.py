"""Data, training and evaluation pipelines shared by the CLI and the ablation runner."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..envs import generate_dataset
from ..mdp import Dataset, load_dataset
from ..nn import load_checkpoint, save_checkpoint
from ..policy import EmpiricalChunkSampler
from ..trainer import (
    Agent,
    EvalResult,
    MetricsLog,
    OnlineResult,
    ReplayBuffer,
    TrainConfig,
    _eval_row,
    evaluate,
    offline_train,
    online_finetune,
)
from .config import RunConfig


def dataset_for(rc: RunConfig) -> Dataset:
    if rc.data_path:
        return load_dataset(rc.data_path)
    return generate_dataset(rc.make_env(), rc.behavior, rc.n_episodes, rc.seed)


@dataclass
class TrainedRun:
    agent: Agent
    buffer: ReplayBuffer
    log: MetricsLog
    online: OnlineResult | None = None


def train_offline(rc: RunConfig, data: Dataset | None = None, cfg: TrainConfig | None = None) -> TrainedRun:
    """Offline phase followed by one evaluation point at the final offline step."""
    cfg = cfg or rc.train
    data = data if data is not None else dataset_for(rc)
    env = rc.make_env()
    buffer = ReplayBuffer.from_dataset(data, cfg)
    agent = Agent.create(cfg, env, buffer.offline)
    rng = np.random.default_rng([cfg.seed, 1])
    log = offline_train(cfg, buffer, agent, rng)
    res = evaluate(agent, rc.env_factory(), cfg.eval_episodes, cfg.seed)
    log.append(_eval_row(cfg.offline_steps, res) | {"phase": "offline_eval"})
    return TrainedRun(agent, buffer, log)


def finetune(rc: RunConfig, run: TrainedRun, cfg: TrainConfig | None = None) -> TrainedRun:
    """Online phase on a copy of ``run``; eval steps are offset by the offline budget."""
    cfg = cfg or run.agent.cfg
    agent = copy.deepcopy(run.agent)
    agent.cfg = cfg
    buffer = copy.deepcopy(run.buffer)
    log = MetricsLog(cfg.scales, list(run.log.rows))
    online_log = MetricsLog(cfg.scales)
    res = online_finetune(cfg, rc.env_factory(), agent, buffer, np.random.default_rng([cfg.seed, 2]), online_log)
    for row in online_log.rows:
        log.append(row | {"step": row["step"] + cfg.offline_steps})
    return TrainedRun(agent, buffer, log, res)


def final_eval(rc: RunConfig, agent: Agent, variant: str | None = None) -> EvalResult:
    return evaluate(agent, rc.env_factory(), agent.cfg.eval_episodes, agent.cfg.seed, variant)


# ---------------------------------------------------------------------------
# Checkpoints


def save_agent(agent: Agent, path: str | Path, meta: dict | None = None) -> None:
    tensors = dict(agent.state_dict())
    if agent.discrete:
        rows = [(s, c, n) for s, row in sorted(agent.policy.counts.items()) for c, n in sorted(row.items())]
        tensors["policy.counts"] = np.asarray(rows, dtype=float).reshape(-1, 3)
    save_checkpoint(path, tensors, meta or {})


def load_agent(cfg: TrainConfig, env, path: str | Path) -> Agent:
    tensors, _ = load_checkpoint(path)
    agent = Agent.create(cfg, env)
    critic = {k[len("critic."):]: v for k, v in tensors.items() if k.startswith("critic.")}
    agent.bundle.load_state_dict(critic)
    if agent.discrete:
        counts = tensors.get("policy.counts")
        if counts is None:
            raise KeyError("checkpoint has no chunk table for the discrete policy")
        sampler: EmpiricalChunkSampler = agent.policy
        for s, c, n in counts.astype(np.int64):
            sampler.counts.setdefault(int(s), {})[int(c)] = int(n)
        sampler._dirty = True
    else:
        for i, p in enumerate(agent.policy.net.params):
            p[...] = tensors[f"policy.p{i}"]
    return agent

