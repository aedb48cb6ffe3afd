"""Scripted experts with temporally correlated noise, and dataset generation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..mdp import Dataset, Trajectory
from ..oracle import greedy_actions, value_iteration


@dataclass(frozen=True)
class BehaviorPolicySpec:
    """Noise model wrapped around the environment's expert.

    Discrete: with probability ``epsilon`` a uniformly random action replaces
    the expert's; a random action is repeated with probability
    ``persistence`` on the next step. ``epsilon_contact`` optionally
    overrides ``epsilon`` in contact cells. Continuous: Ornstein-Uhlenbeck
    noise with rate ``ou_theta`` and scale ``ou_sigma`` is added to a PD
    controller.
    """

    epsilon: float = 0.3
    persistence: float = 0.0
    epsilon_contact: float | None = None
    ou_theta: float = 1.0
    ou_sigma: float = 0.2
    expert_gamma: float = 0.99

    def __post_init__(self):
        for name in ("epsilon", "persistence", "ou_theta", "ou_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.epsilon > 1 or self.persistence > 1:
            raise ValueError("epsilon and persistence are probabilities")
        if self.epsilon_contact is not None and not 0 <= self.epsilon_contact <= 1:
            raise ValueError("epsilon_contact is a probability")


def expert_policy(env, gamma: float = 0.99) -> np.ndarray:
    """Greedy action of the optimal closed-loop value, ties to the lowest index."""
    _, Q = value_iteration(env, gamma)
    return greedy_actions(Q)


def state_epsilon(env, spec: BehaviorPolicySpec) -> np.ndarray:
    eps = np.full(env.n_states, spec.epsilon)
    if spec.epsilon_contact is not None:
        contact = np.array([env.region(s) == "contact" for s in range(env.n_states)])
        eps[contact] = spec.epsilon_contact
    return eps


def markov_behavior_table(env, spec: BehaviorPolicySpec) -> np.ndarray:
    """pi_beta[s, a] of the sticky-noise behavior; exact only without persistence."""
    if spec.persistence != 0.0:
        raise ValueError("the behavior is not Markov when persistence > 0")
    expert = expert_policy(env, spec.expert_gamma)
    eps = state_epsilon(env, spec)
    pi = np.tile((eps / env.n_actions)[:, None], (1, env.n_actions))
    pi[np.arange(env.n_states), expert] += 1.0 - eps
    return pi


class StickyNoisePolicy:
    def __init__(self, env, spec: BehaviorPolicySpec, rng: np.random.Generator, expert: np.ndarray | None = None):
        self.n_actions = env.n_actions
        self.expert = expert_policy(env, spec.expert_gamma) if expert is None else expert
        self.eps = state_epsilon(env, spec)
        self.persistence = spec.persistence
        self.rng = rng
        self._noise_action: int | None = None

    def reset(self) -> None:
        self._noise_action = None

    def __call__(self, s: int) -> int:
        if self._noise_action is not None and self.rng.random() < self.persistence:
            return self._noise_action
        if self.rng.random() < self.eps[s]:
            self._noise_action = int(self.rng.integers(self.n_actions))
            return self._noise_action
        self._noise_action = None
        return int(self.expert[s])


class OUNoisePolicy:
    """PD expert plus exactly discretized OU noise with lag-1 correlation exp(-theta * dt)."""

    def __init__(self, env, spec: BehaviorPolicySpec, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.decay = float(np.exp(-spec.ou_theta * env.dt))
        if spec.ou_theta > 0:
            self.scale = spec.ou_sigma * np.sqrt((1.0 - self.decay**2) / (2.0 * spec.ou_theta))
        else:
            self.scale = spec.ou_sigma * np.sqrt(env.dt)
        self.stationary = spec.ou_sigma / np.sqrt(2.0 * spec.ou_theta) if spec.ou_theta > 0 else 0.0
        self.noise = np.zeros(env.action_dim)

    def reset(self) -> None:
        self.noise = self.rng.normal(0.0, self.stationary, size=self.env.action_dim)

    def step_noise(self) -> np.ndarray:
        self.noise = self.decay * self.noise + self.scale * self.rng.normal(size=self.env.action_dim)
        return self.noise

    def __call__(self, s) -> np.ndarray:
        return np.clip(self.env.expert_action(s) + self.step_noise(), -1.0, 1.0)


def make_behavior(env, spec: BehaviorPolicySpec, rng: np.random.Generator, expert=None):
    if env.discrete:
        return StickyNoisePolicy(env, spec, rng, expert)
    return OUNoisePolicy(env, spec, rng)


def rollout(env, policy, seed) -> Trajectory:
    s = env.reset(seed)
    policy.reset()
    states, actions, rewards = [s], [], []
    done = False
    while not done:
        a = policy(s)
        s, r, done = env.step(a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
    dtype = np.int64 if env.discrete else float
    return Trajectory(
        np.asarray(states, dtype=dtype), np.asarray(actions, dtype=dtype), np.asarray(rewards), env.reached_goal
    )


def generate_dataset(env, spec: BehaviorPolicySpec, n_episodes: int, seed: int) -> Dataset:
    """Roll out the behavior policy; every episode draws its own child seeds."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    expert = expert_policy(env, spec.expert_gamma) if env.discrete else None
    trajs = []
    for child in children:
        env_seed, pol_seed = child.spawn(2)
        policy = make_behavior(env, spec, np.random.default_rng(pol_seed), expert)
        trajs.append(rollout(env, policy, env_seed))
    meta = {
        "env": env.name,
        "env_params": env.params(),
        "behavior": asdict(spec),
        "seed": int(seed),
        "discrete": bool(env.discrete),
        "n_episodes": int(n_episodes),
    }
    return Dataset(trajs, meta)
