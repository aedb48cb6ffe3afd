"""Behavior policies over h-step chunks.

Continuous actions use a flow-matching velocity field integrated with Euler
steps; discrete actions use the empirical chunk frequencies of the data.
"""

from __future__ import annotations

import numpy as np

from .mdp import ChunkBatch
from .nn import AdamW, DenseNet
from .oracle import encode_chunks


class FlowPolicy:
    """Velocity field ``v(s, x_tau, tau)`` over flattened chunks of shape (h, action_dim)."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        h: int,
        width: int = 64,
        depth: int = 2,
        flow_steps: int = 10,
        lr: float = 3e-4,
        seed: int = 0,
        low: float = -1.0,
        high: float = 1.0,
    ):
        if flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")
        self.state_dim, self.action_dim, self.h = int(state_dim), int(action_dim), int(h)
        self.flow_steps = int(flow_steps)
        self.low, self.high = float(low), float(high)
        rng = np.random.default_rng(seed)
        d = self.h * self.action_dim
        self.net = DenseNet([self.state_dim + d + 1, *([width] * depth), d], rng)
        self.opt = AdamW(self.net.params, lr=lr)

    @property
    def chunk_dim(self) -> int:
        return self.h * self.action_dim

    def velocity(self, states, x, tau, params=None):
        inp = np.concatenate([states, x, np.reshape(tau, (-1, 1))], axis=1)
        return self.net.forward(inp, params)

    def bc_loss(self, states, chunks, rng=None, x0=None, tau=None, params=None):
        """Flow-matching loss ``mean ||v(s, x_tau, tau) - (a - x0)||^2`` and its gradients.

        ``x0`` and ``tau`` may be fixed explicitly; otherwise they are drawn from
        N(0, I) and U[0, 1].
        """
        states = np.asarray(states, dtype=float)
        a = np.asarray(chunks, dtype=float).reshape(len(states), -1)
        if a.shape[1] != self.chunk_dim:
            raise ValueError(f"chunks must have {self.h} actions of dimension {self.action_dim}")
        B = len(states)
        if x0 is None:
            x0 = rng.normal(size=a.shape)
        if tau is None:
            tau = rng.uniform(size=B)
        tau = np.asarray(tau, dtype=float).reshape(B)
        x_tau = (1.0 - tau)[:, None] * x0 + tau[:, None] * a
        v, cache = self.velocity(states, x_tau, tau, params)
        err = v - (a - x0)
        loss = float((err**2).sum(1).mean())
        grads, _ = self.net.backward(cache, 2.0 * err / B, params)
        return loss, grads

    def update(self, states, chunks, rng) -> float:
        loss, grads = self.bc_loss(states, chunks, rng)
        self.opt.step(self.net.params, grads)
        return loss

    def sample(self, states, n: int, rng: np.random.Generator) -> np.ndarray:
        """Candidates of shape (B, n, h, action_dim), Euler-integrated then clipped."""
        if n < 1:
            raise ValueError("need at least one sample")
        states = np.atleast_2d(np.asarray(states, dtype=float))
        B = len(states)
        s_rep = np.repeat(states, n, axis=0)
        x = rng.normal(size=(B * n, self.chunk_dim))
        dt = 1.0 / self.flow_steps
        for m in range(self.flow_steps):
            v, _ = self.velocity(s_rep, x, np.full(B * n, m * dt))
            x = x + dt * v
            if not np.all(np.isfinite(x)):
                raise FloatingPointError("non-finite state during flow integration")
        x = np.clip(x, self.low, self.high)
        return x.reshape(B, n, self.h, self.action_dim)


def sample_chunks(policy: FlowPolicy, state, n: int, seed: int) -> np.ndarray:
    """``n`` chunks for one state, deterministic in ``seed``."""
    return policy.sample(np.asarray(state, dtype=float)[None], n, np.random.default_rng(seed))[0]


class EmpiricalChunkSampler:
    """Empirical distribution of observed h-chunks per discrete state.

    States never seen in the data borrow the distribution of the nearest
    observed state under ``distance``.
    """

    def __init__(self, n_states: int, n_actions: int, h: int, distance=None):
        self.n_states, self.n_actions, self.h = int(n_states), int(n_actions), int(h)
        self.distance = distance or (lambda a, b: abs(int(a) - int(b)))
        self.counts: dict[int, dict[int, int]] = {}
        self._dirty = True

    @classmethod
    def from_batch(cls, batch: ChunkBatch, n_states: int, n_actions: int, distance=None):
        sampler = cls(n_states, n_actions, batch.h, distance)
        sampler.add(batch)
        return sampler

    def add(self, batch: ChunkBatch) -> None:
        if len(batch) == 0:
            return
        if batch.h != self.h:
            raise ValueError(f"expected chunks of length {self.h}")
        codes = encode_chunks(batch.actions, self.n_actions)
        for s, c in zip(batch.states[:, 0].astype(np.int64).tolist(), codes.tolist()):
            row = self.counts.setdefault(s, {})
            row[c] = row.get(c, 0) + 1
        self._dirty = True

    def _build(self) -> None:
        if not self.counts:
            raise ValueError("empty chunk table")
        seen = sorted(self.counts)
        codes, cum, lo, hi = [], [], np.zeros(self.n_states, np.int64), np.zeros(self.n_states, np.int64)
        total = 0
        for s in seen:
            lo[s] = len(codes)
            for c in sorted(self.counts[s]):
                total += self.counts[s][c]
                codes.append(c)
                cum.append(total)
            hi[s] = len(codes)
        self._codes = np.asarray(codes, np.int64)
        self._cum = np.asarray(cum, np.int64)
        base = np.concatenate([[0], self._cum])
        self._proxy = np.array([min(seen, key=lambda t: (self.distance(s, t), t)) for s in range(self.n_states)])
        self._lo, self._hi = lo, hi
        self._base = base[lo]  # cumulative count before each state's block
        self._total = base[hi] - base[lo]
        self._dirty = False

    def probs(self, s: int) -> dict[int, float]:
        row = self.counts[int(s)]
        n = sum(row.values())
        return {c: m / n for c, m in row.items()}

    def sample(self, states, n: int, rng: np.random.Generator) -> np.ndarray:
        """i.i.d. draws with replacement, shape (B, n, h)."""
        if self._dirty:
            self._build()
        states = np.atleast_1d(np.asarray(states, dtype=np.int64))
        proxy = self._proxy[states]
        base = self._base[proxy][:, None]
        draws = rng.integers(0, self._total[proxy][:, None], size=(len(states), n))
        idx = np.searchsorted(self._cum, base + draws, side="right")
        codes = self._codes[idx]
        out = np.empty((len(states), n, self.h), np.int64)
        for j in range(self.h - 1, -1, -1):
            codes, out[:, :, j] = np.divmod(codes, self.n_actions)
        return out


def sample_chunks_discrete(sampler: EmpiricalChunkSampler, state: int, n: int, seed: int) -> np.ndarray:
    return sampler.sample([state], n, np.random.default_rng(seed))[0]
