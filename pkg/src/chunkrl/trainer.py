"""Offline pretraining, online fine-tuning with open-loop chunk execution, evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .critics import (
    CriticBundle,
    CriticConfig,
    ContinuousEncoder,
    DiscreteEncoder,
    Head,
    qh_loss,
    qk_loss,
    vh_loss,
    vk_loss,
)
from .mdp import ChunkBatch, Dataset, ScaleSet, Trajectory, chunk_arrays
from .nn import save_checkpoint
from .policy import EmpiricalChunkSampler, FlowPolicy
from .selector import parse_variant, select


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    h: int = 5
    universe: tuple[int, ...] = (1, 5, 10, 25)
    kappa: float = 0.9
    n_candidates: int = 8
    batch_size: int = 256
    lr: float = 3e-4
    table_lr: float = 0.01
    weight_decay: float = 0.0
    ema_tau: float = 0.005
    n_q: int = 2
    width: int = 64
    depth: int = 2
    tabular: bool = True
    utd: int = 1
    flow_steps: int = 10
    offline_steps: int = 20_000
    online_steps: int = 0
    warmup_steps: int = 0
    mix_ratio: float = 0.5
    buffer_capacity: int = 1_000_000
    stride: int = 1
    bootstrap: str = "vh"
    selector: str = "aqc"
    eval_interval: int = 0
    eval_episodes: int = 50
    log_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.n_candidates < 1 or self.batch_size < 1 or self.utd < 1:
            raise ValueError("n_candidates, batch_size and utd must be positive")
        object.__setattr__(self, "universe", tuple(int(k) for k in self.universe))
        parse_variant(self.selector)

    @property
    def scales(self) -> ScaleSet:
        return ScaleSet.from_horizon(self.h, self.universe)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(
            tabular=self.tabular,
            width=self.width,
            depth=self.depth,
            n_q=self.n_q,
            lr=self.lr,
            table_lr=self.table_lr,
            weight_decay=self.weight_decay,
            tau=self.ema_tau,
            seed=self.seed,
        )


class ReplayBuffer:
    """Offline h-chunks (never evicted) plus a FIFO of online episodes."""

    def __init__(self, offline: ChunkBatch, h: int, capacity: int, mix_ratio: float = 0.5, stride: int = 1):
        if len(offline) == 0:
            raise ValueError("offline data yields no chunks")
        self.offline = offline
        self.h = h
        self.capacity = int(capacity)
        self.mix_ratio = float(mix_ratio)
        self.stride = stride
        self.episodes: list[Trajectory] = []
        self._online: ChunkBatch | None = None
        self.n_online_transitions = 0

    @classmethod
    def from_dataset(cls, dataset: Dataset, cfg: TrainConfig) -> "ReplayBuffer":
        return cls(chunk_arrays(dataset, cfg.h, cfg.stride), cfg.h, cfg.buffer_capacity, cfg.mix_ratio, cfg.stride)

    def add_episode(self, traj: Trajectory) -> ChunkBatch:
        self.episodes.append(traj)
        self.n_online_transitions += len(traj)
        while self.n_online_transitions > self.capacity and len(self.episodes) > 1:
            old = self.episodes.pop(0)
            self.n_online_transitions -= len(old)
        self._online = None
        return chunk_arrays([traj], self.h, self.stride)

    @property
    def online(self) -> ChunkBatch | None:
        if self._online is None and self.episodes:
            b = chunk_arrays(self.episodes, self.h, self.stride)
            self._online = b if len(b) else None
        return self._online

    def sample(self, batch_size: int, rng: np.random.Generator) -> ChunkBatch:
        online = self.online
        if online is None:
            return self.offline.take(rng.integers(len(self.offline), size=batch_size))
        n_off = int(round(self.mix_ratio * batch_size))
        off = self.offline.take(rng.integers(len(self.offline), size=n_off))
        on = online.take(rng.integers(len(online), size=batch_size - n_off))
        return ChunkBatch.concatenate([off, on])


class Agent:
    """Critic bundle plus behavior policy; proposes candidates and selects chunks."""

    def __init__(self, cfg: TrainConfig, bundle: CriticBundle, policy):
        self.cfg = cfg
        self.bundle = bundle
        self.policy = policy

    @classmethod
    def create(cls, cfg: TrainConfig, env, offline: ChunkBatch | None = None) -> "Agent":
        scales = cfg.scales
        if env.discrete:
            enc = DiscreteEncoder(env.n_states, env.n_actions)
            policy = EmpiricalChunkSampler(env.n_states, env.n_actions, cfg.h, env.distance)
            if offline is not None:
                policy.add(offline)
            ccfg = cfg.critic_config()
        else:
            enc = ContinuousEncoder(env.state_dim, env.action_dim)
            policy = FlowPolicy(
                env.state_dim, env.action_dim, cfg.h, cfg.width, cfg.depth, cfg.flow_steps, cfg.lr, seed=cfg.seed + 1
            )
            ccfg = replace(cfg.critic_config(), tabular=False)
        return cls(cfg, CriticBundle(scales, enc, ccfg), policy)

    @property
    def discrete(self) -> bool:
        return isinstance(self.policy, EmpiricalChunkSampler)

    def candidates(self, states, rng: np.random.Generator) -> np.ndarray:
        return self.policy.sample(states, self.cfg.n_candidates, rng)

    def act(self, states, rng: np.random.Generator, variant: str | None = None):
        cands = self.candidates(states, rng)
        return select(variant or self.cfg.selector, self.bundle, states, cands, self.cfg.gamma, rng)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"critic.{k}": v for k, v in self.bundle.state_dict().items()}
        if not self.discrete:
            for i, p in enumerate(self.policy.net.params):
                out[f"policy.p{i}"] = p
        return out

    def param_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsLog:
    """Append-only metric rows; serialized with a fixed column order."""

    scales: ScaleSet
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        partial = self.scales.partial()
        return (
            ["step", "phase", "loss_qh", "loss_vh"]
            + [f"loss_qk_{k}" for k in partial]
            + [f"loss_vk_{k}" for k in partial]
            + ["loss_bc", "success_rate", "mean_kstar"]
            + [f"per_k_selection_freq_{k}" for k in self.scales]
        )

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def update_step(agent: Agent, batch: ChunkBatch, rng: np.random.Generator) -> dict[str, float]:
    """One pass over every loss in order: Q^h, V^h, then (Q^k, V^k) per partial scale, then BC."""
    cfg, bundle = agent.cfg, agent.bundle
    h = bundle.h
    losses: dict[str, float] = {}
    s_next = batch.states[:, h]
    loss, g = qh_loss(bundle, batch, agent.candidates(s_next, rng), cfg.gamma)
    _apply(bundle.q[h], g, loss, "qh")
    losses["loss_qh"] = loss
    loss, g = vh_loss(bundle, batch, cfg.kappa)
    _apply(bundle.v[h], g, loss, "vh")
    losses["loss_vh"] = loss
    for k in bundle.scales.partial():
        cands = agent.candidates(batch.states[:, k], rng) if cfg.bootstrap == "qh" else None
        loss, g = qk_loss(bundle, k, batch, cfg.gamma, cfg.bootstrap, cands)
        _apply(bundle.q[k], g, loss, f"q{k}")
        losses[f"loss_qk_{k}"] = loss
        loss, g = vk_loss(bundle, k, batch, cfg.kappa)
        _apply(bundle.v[k], g, loss, f"v{k}")
        losses[f"loss_vk_{k}"] = loss
    if not agent.discrete:
        losses["loss_bc"] = agent.policy.update(batch.states[:, 0], batch.actions, rng)
    return losses


def _apply(head: Head, grads, loss: float, name: str) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite {name} loss")
    head.apply(grads)


def _snapshot(agent: Agent) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in agent.state_dict().items()}


def offline_train(
    cfg: TrainConfig,
    buffer: ReplayBuffer,
    agent: Agent,
    rng: np.random.Generator,
    n_steps: int | None = None,
    log: MetricsLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> MetricsLog:
    n_steps = cfg.offline_steps if n_steps is None else n_steps
    log = log if log is not None else MetricsLog(cfg.scales)
    last_good = _snapshot(agent) if checkpoint_path else None
    acc: dict[str, float] = {}
    for step in range(1, n_steps + 1):
        batch = buffer.sample(cfg.batch_size, rng)
        try:
            losses = update_step(agent, batch, rng)
        except (TrainingDiverged, FloatingPointError) as exc:
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, last_good, {"step": step - 1, "error": str(exc)})
            raise TrainingDiverged(f"offline step {step}: {exc}") from exc
        for k, v in losses.items():
            acc[k] = acc.get(k, 0.0) + v
        if cfg.log_interval and step % cfg.log_interval == 0:
            n = cfg.log_interval
            log.append({"step": step, "phase": "offline", **{k: v / n for k, v in acc.items()}})
            acc = {}
            if checkpoint_path is not None:
                last_good = _snapshot(agent)
    return log


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    mean_kstar: float
    k_freq: dict[int, float]
    trace: list[tuple]  # (episode, state, k_star, region)


def run_episodes(
    agent: Agent,
    make_env: Callable[[], object],
    seeds: Sequence[int],
    variant: str | None = None,
    rng: np.random.Generator | None = None,
) -> EvalResult:
    """Roll out the agent on one env per seed in lockstep; queries are batched across episodes.

    Each selected chunk is executed open-loop: the first action re-queries,
    the rest are marked as blind steps.
    """
    cfg = agent.cfg
    rng = rng if rng is not None else np.random.default_rng(int(seeds[0]) if len(seeds) else 0)
    envs = [make_env() for _ in seeds]
    states = [env.reset(int(sd)) for env, sd in zip(envs, seeds)]
    queues: list[list] = [[] for _ in envs]
    pos = [0] * len(envs)
    returns = np.zeros(len(envs))
    disc = np.ones(len(envs))
    trace = []
    counts = {k: 0 for k in cfg.scales}
    active = list(range(len(envs)))
    while active:
        need = [i for i in active if pos[i] >= len(queues[i])]
        if need:
            res = agent.act(np.asarray([states[i] for i in need]), rng, variant)
            for j, i in enumerate(need):
                k = int(res.k_star[j])
                queues[i], pos[i] = list(res.chunks[j]), 0
                counts[k] += 1
                trace.append((i, _state_key(states[i]), k, envs[i].region(states[i])))
        for i in active:
            a = queues[i][pos[i]]
            s, r, _ = envs[i].step(_unwrap(a), requery=pos[i] == 0)
            pos[i] += 1
            states[i] = s
            returns[i] += disc[i] * r
            disc[i] *= cfg.gamma
        active = [i for i in active if not envs[i].done]
    n_sel = sum(counts.values())
    k_freq = {k: (counts[k] / n_sel if n_sel else 0.0) for k in cfg.scales}
    mean_k = float(sum(k * f for k, f in k_freq.items()))
    success = float(np.mean([e.reached_goal for e in envs])) if envs else 0.0
    return EvalResult(success, float(returns.mean()) if envs else 0.0, mean_k, k_freq, trace)


def evaluate(agent: Agent, make_env, n_episodes: int = 50, seed: int = 0, variant: str | None = None) -> EvalResult:
    """Greedy evaluation on fixed seeds; never mutates the agent's parameters."""
    seeds = np.random.SeedSequence([seed, 0xE7A1]).generate_state(n_episodes).tolist()
    return run_episodes(agent, make_env, seeds, variant, np.random.default_rng([seed, 0xE7A2]))


def _unwrap(a):
    a = np.asarray(a)
    return int(a) if a.ndim == 0 else a


def _state_key(s):
    s = np.asarray(s)
    return int(s) if s.ndim == 0 else tuple(float(x) for x in s)


def _eval_row(step: int, res: EvalResult) -> dict:
    row = {"step": step, "phase": "eval", "success_rate": res.success_rate, "mean_kstar": res.mean_kstar}
    row.update({f"per_k_selection_freq_{k}": f for k, f in res.k_freq.items()})
    return row


@dataclass
class OnlineResult:
    log: MetricsLog
    evals: list[tuple[int, EvalResult]]
    trace: list[tuple]  # (env_step, state, k_star, region, steps_executed)
    episodes: int


def online_finetune(
    cfg: TrainConfig,
    make_env: Callable[[], object],
    agent: Agent,
    buffer: ReplayBuffer,
    rng: np.random.Generator,
    log: MetricsLog | None = None,
    n_steps: int | None = None,
) -> OnlineResult:
    """Collect experience with open-loop chunk execution and keep training on mixed batches.

    After ``warmup_steps`` environment steps, every step triggers ``utd``
    gradient updates. With ``eval_interval > 0`` a frozen-snapshot
    evaluation runs every ``eval_interval`` environment steps.
    """
    n_steps = cfg.online_steps if n_steps is None else n_steps
    log = log if log is not None else MetricsLog(cfg.scales)
    env = make_env()
    seeds = np.random.SeedSequence([cfg.seed, 0x0411]).generate_state(max(n_steps, 1)).tolist()
    evals, trace = [], []
    acc: dict[str, float] = {}
    n_acc = 0
    t = 0
    episodes = 0
    while t < n_steps:
        s = env.reset(int(seeds[episodes % len(seeds)]))
        episodes += 1
        states, actions, rewards = [s], [], []
        while not env.done and t < n_steps:
            res = agent.act(np.asarray([s]), rng)
            chunk = list(res.chunks[0])
            executed = 0
            for j, a in enumerate(chunk):
                s, r, done = env.step(_unwrap(a), requery=j == 0)
                states.append(s)
                actions.append(_unwrap(a))
                rewards.append(r)
                executed += 1
                t += 1
                if t > cfg.warmup_steps:
                    for _ in range(cfg.utd):
                        losses = update_step(agent, buffer.sample(cfg.batch_size, rng), rng)
                        for key, v in losses.items():
                            acc[key] = acc.get(key, 0.0) + v
                        n_acc += 1
                if cfg.log_interval and t % cfg.log_interval == 0 and n_acc:
                    log.append({"step": t, "phase": "online", **{k: v / n_acc for k, v in acc.items()}})
                    acc, n_acc = {}, 0
                if cfg.eval_interval and t % cfg.eval_interval == 0:
                    res_eval = evaluate(agent, make_env, cfg.eval_episodes, cfg.seed)
                    evals.append((t, res_eval))
                    log.append(_eval_row(t, res_eval))
                if done or t >= n_steps:
                    break
            trace.append((t - executed, _state_key(states[-executed - 1]), int(res.k_star[0]),
                          env.region(states[-executed - 1]), executed))
        dtype = np.int64 if agent.discrete else float
        traj = Trajectory(np.asarray(states, dtype=dtype), np.asarray(actions, dtype=dtype), np.asarray(rewards),
                          env.reached_goal)
        new = buffer.add_episode(traj)
        if agent.discrete:
            agent.policy.add(new)
    return OnlineResult(log, evals, trace, episodes)


# ---------------------------------------------------------------------------
# n-step return baseline over single actions


def nstep_target(bundle: CriticBundle, batch: ChunkBatch, n: int, gamma: float, candidates) -> np.ndarray:
    """``sum_{j<n} gamma^j r_j + gamma^n * max_i min_e Qbar(s_{t+n}, a_i)`` with first-action candidates."""
    _, _, ret, s_next, mask = batch.prefix(n, gamma)
    cands = np.asarray(candidates)
    B, N = cands.shape[:2]
    s_rep = np.repeat(s_next, N, axis=0)
    first = cands[:, :, :1].reshape(B * N, 1, *cands.shape[3:])
    boot = bundle.q_value(1, s_rep, first, target=True).reshape(B, N).max(1)
    return ret + gamma**n * mask * boot


def nstep_baseline_train(
    cfg: TrainConfig, buffer: ReplayBuffer, agent: Agent, n: int, rng: np.random.Generator, n_steps: int | None = None
) -> CriticBundle:
    """Train a one-action critic with the uncorrected n-step backup; candidates come from the agent's policy."""
    if not 1 <= n <= cfg.h:
        raise ValueError(f"need 1 <= n <= {cfg.h}")
    bundle = CriticBundle(ScaleSet((1,)), agent.bundle.encoder, agent.bundle.cfg)
    n_steps = cfg.offline_steps if n_steps is None else n_steps
    head = bundle.q[1]
    for _ in range(n_steps):
        batch = buffer.sample(cfg.batch_size, rng)
        y = nstep_target(bundle, batch, n, cfg.gamma, agent.candidates(batch.states[:, n], rng))
        x = bundle.encoder.q_input(batch.states[:, 0], batch.actions[:, :1])
        q, caches = head.forward(x)
        w = np.full(len(batch), 1.0 / len(batch)) if batch.weights is None else batch.weights / batch.weights.sum()
        err = q - y[None]
        loss = float((w[None] * err**2).sum() / q.shape[0])
        _apply(head, head.backward(caches, 2.0 * w[None] * err / q.shape[0]), loss, "nstep")
        if not agent.discrete:
            agent.policy.update(batch.states[:, 0], batch.actions, rng)
    return bundle
