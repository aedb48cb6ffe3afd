"""Chunked critics, expectile value heads and their TD / expectile losses.

A :class:`CriticBundle` holds one Q head and one V head per scale in the
scale set; the Q head at the largest scale is the long-horizon critic. Every
head owns its optimizer state and an EMA shadow; bootstrap targets are always
read from shadows. Each loss returns ``(loss, grads)`` for exactly one head
and never touches the others.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp import ChunkBatch, ScaleSet
from .nn import AdamW, DenseNet, EmaTarget, TableNet


def expectile_loss(u: np.ndarray, kappa: float):
    """Elementwise ``|kappa - 1[u<0]| * u**2`` and its derivative in ``u``."""
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    u = np.asarray(u, dtype=float)
    w = np.where(u < 0, 1.0 - kappa, kappa)
    return w * u * u, 2.0 * w * u


# ---------------------------------------------------------------------------
# Input encoders


class DiscreteEncoder:
    """Integer keys: ``s`` for values and ``s * A**k + code(chunk)`` for chunk values."""

    discrete = True

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)

    def q_input(self, states, chunks):
        chunks = np.asarray(chunks, dtype=np.int64)
        k = chunks.shape[-1]
        w = self.n_actions ** np.arange(k - 1, -1, -1, dtype=np.int64)
        return np.asarray(states, dtype=np.int64) * self.n_actions**k + chunks @ w

    def v_input(self, states):
        return np.asarray(states, dtype=np.int64)

    def q_keys(self, k: int) -> int:
        return self.n_states * self.n_actions**k


class ContinuousEncoder:
    """Concatenation of the state vector and the flattened chunk."""

    discrete = False

    def __init__(self, state_dim: int, action_dim: int):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)

    def q_input(self, states, chunks):
        states = np.asarray(states, dtype=float)
        chunks = np.asarray(chunks, dtype=float)
        return np.concatenate([states, chunks.reshape(len(chunks), -1)], axis=1)

    def v_input(self, states):
        return np.asarray(states, dtype=float)

    def q_width(self, k: int) -> int:
        return self.state_dim + k * self.action_dim


# ---------------------------------------------------------------------------
# Heads


class Head:
    """Ensemble of identically shaped models with one AdamW state and one EMA shadow."""

    def __init__(self, make: Callable[[], object], n_members: int, lr: float, weight_decay: float, tau: float):
        self.members = [make() for _ in range(n_members)]
        self.sizes = [len(m.params) for m in self.members]
        self.opt = AdamW(self.params, lr=lr, weight_decay=weight_decay)
        self.ema = EmaTarget(self.params, tau)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for m in self.members for p in m.params]

    def _split(self, flat):
        out, i = [], 0
        for n in self.sizes:
            out.append(flat[i : i + n])
            i += n
        return out

    def forward(self, x, target: bool = False):
        """Outputs of every member, shape (n_members, B), plus caches for backward."""
        shadows = self._split(self.ema.params) if target else [None] * len(self.members)
        outs, caches = [], []
        for m, sh in zip(self.members, shadows):
            y, c = m.forward(x, sh)
            outs.append(y[:, 0])
            caches.append(c)
        return np.stack(outs), caches

    def predict(self, x, target: bool = False) -> np.ndarray:
        return self.forward(x, target)[0]

    def min(self, x, target: bool = False) -> np.ndarray:
        return self.predict(x, target).min(0)

    def backward(self, caches, dout: np.ndarray) -> list[np.ndarray]:
        grads = []
        for m, c, d in zip(self.members, caches, dout):
            g, _ = m.backward(c, d[:, None])
            grads += g
        return grads

    def apply(self, grads) -> None:
        self.opt.step(self.params, grads)
        self.ema.update(self.params)

    def sync_target(self) -> None:
        for sh, p in zip(self.ema.params, self.params):
            sh[...] = p

    def set_table(self, values: np.ndarray) -> None:
        """Set every member of a tabular head (and its shadow) to ``values``."""
        for m in self.members:
            m.params[0][:, 0] = values
        self.sync_target()


@dataclass(frozen=True)
class CriticConfig:
    tabular: bool = True
    width: int = 64
    depth: int = 2
    n_q: int = 2
    lr: float = 3e-4
    table_lr: float = 0.01
    weight_decay: float = 0.0
    tau: float = 0.005
    table_init: float = 0.0
    seed: int = 0


class CriticBundle:
    """Q and V heads for every scale in ``scales``."""

    def __init__(self, scales: ScaleSet, encoder, cfg: CriticConfig = CriticConfig()):
        self.scales = scales
        self.encoder = encoder
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.q: dict[int, Head] = {}
        self.v: dict[int, Head] = {}
        tabular = cfg.tabular and encoder.discrete
        if cfg.tabular and not encoder.discrete:
            raise ValueError("tabular critics need a discrete encoder")
        lr = cfg.table_lr if tabular else cfg.lr
        for k in scales:
            if tabular:
                q_make = lambda k=k: TableNet(encoder.q_keys(k), 1, cfg.table_init)
                v_make = lambda: TableNet(encoder.n_states, 1, cfg.table_init)
            elif encoder.discrete:
                raise ValueError("dense critics need a continuous encoder")
            else:
                hidden = [cfg.width] * cfg.depth
                q_make = lambda k=k: DenseNet([encoder.q_width(k), *hidden, 1], rng, out_scale=0.01)
                v_make = lambda: DenseNet([encoder.state_dim, *hidden, 1], rng, out_scale=0.01)
            self.q[k] = Head(q_make, cfg.n_q, lr, cfg.weight_decay, cfg.tau)
            self.v[k] = Head(v_make, 1, lr, cfg.weight_decay, cfg.tau)

    @property
    def h(self) -> int:
        return self.scales.h

    def heads(self) -> dict[str, Head]:
        out = {}
        for k in self.scales:
            out[f"q{k}"] = self.q[k]
            out[f"v{k}"] = self.v[k]
        return out

    def q_value(self, k: int, states, chunks, target: bool = False) -> np.ndarray:
        """Ensemble-min chunk value of the first ``k`` actions of ``chunks``."""
        if k not in self.q:
            raise KeyError(f"no critic head for scale {k}")
        chunks = np.asarray(chunks)
        return self.q[k].min(self.encoder.q_input(states, chunks[:, :k]), target)

    def v_value(self, k: int, states, target: bool = False) -> np.ndarray:
        if k not in self.v:
            raise KeyError(f"no value head for scale {k}")
        return self.v[k].predict(self.encoder.v_input(states), target)[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, head in self.heads().items():
            for i, p in enumerate(head.params):
                out[f"{name}.p{i}"] = p
            for i, p in enumerate(head.ema.params):
                out[f"{name}.ema{i}"] = p
            for i, p in enumerate(head.opt.state_arrays()):
                out[f"{name}.opt{i}"] = p
            out[f"{name}.opt_t"] = np.array(float(head.opt.t))
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for name, head in self.heads().items():
            for i, p in enumerate(head.params):
                p[...] = tensors[f"{name}.p{i}"]
            for i, p in enumerate(head.ema.params):
                p[...] = tensors[f"{name}.ema{i}"]
            for i, p in enumerate(head.opt.state_arrays()):
                p[...] = tensors[f"{name}.opt{i}"]
            head.opt.t = int(np.asarray(tensors[f"{name}.opt_t"]).item())


# ---------------------------------------------------------------------------
# Losses


def _weights(batch: ChunkBatch) -> np.ndarray:
    if batch.weights is None:
        return np.full(len(batch), 1.0 / len(batch))
    w = np.asarray(batch.weights, dtype=float)
    return w / w.sum()


def emaq_target(bundle: CriticBundle, states_next, candidates: np.ndarray) -> np.ndarray:
    """``max_i min_e Qbar^h(s', cand_i)`` per row; ``candidates`` has shape (B, N, h, ...)."""
    candidates = np.asarray(candidates)
    if candidates.ndim < 3 or candidates.shape[1] < 1:
        raise ValueError("need at least one candidate per row")
    B, N = candidates.shape[:2]
    h = bundle.h
    if candidates.shape[2] != h:
        raise ValueError(f"candidates must have length {h}")
    s_rep = np.repeat(np.asarray(states_next), N, axis=0)
    flat = candidates.reshape(B * N, *candidates.shape[2:])
    return bundle.q_value(h, s_rep, flat, target=True).reshape(B, N).max(1)


def _regress(head: Head, x, y: np.ndarray, w: np.ndarray):
    q, caches = head.forward(x)
    n = q.shape[0]
    err = q - y[None, :]
    loss = float((w[None, :] * err**2).sum() / n)
    grads = head.backward(caches, 2.0 * w[None, :] * err / n)
    return loss, grads


def _check_len(batch: ChunkBatch, k: int) -> None:
    if batch.h < k:
        raise ValueError(f"batch chunks have length {batch.h}, need at least {k}")


def qh_target(bundle: CriticBundle, batch: ChunkBatch, candidates, gamma: float) -> np.ndarray:
    h = bundle.h
    _, _, ret, s_next, mask = batch.prefix(h, gamma)
    boot = emaq_target(bundle, s_next, candidates)
    return ret + gamma**h * mask * boot


def qh_loss(bundle: CriticBundle, batch: ChunkBatch, candidates, gamma: float):
    """Squared h-step TD error of the long-horizon critic with an EMAQ bootstrap."""
    h = bundle.h
    if batch.h != h:
        raise ValueError(f"long-horizon loss needs chunks of length {h}, got {batch.h}")
    y = qh_target(bundle, batch, candidates, gamma)
    s, a = batch.states[:, 0], batch.actions[:, :h]
    return _regress(bundle.q[h], bundle.encoder.q_input(s, a), y, _weights(batch))


def _expectile_fit(head: Head, x, q: np.ndarray, w: np.ndarray, kappa: float):
    v, caches = head.forward(x)
    loss_el, dl_du = expectile_loss(q - v[0], kappa)
    loss = float((w * loss_el).sum())
    grads = head.backward(caches, -(w * dl_du)[None, :])
    return loss, grads


def vh_loss(bundle: CriticBundle, batch: ChunkBatch, kappa: float):
    """Expectile regression of V^h onto the shadow long-horizon critic at data chunks."""
    h = bundle.h
    _check_len(batch, h)
    s = batch.states[:, 0]
    q = bundle.q_value(h, s, batch.actions[:, :h], target=True)
    return _expectile_fit(bundle.v[h], bundle.encoder.v_input(s), q, _weights(batch), kappa)


BOOTSTRAPS = ("vh", "v1", "qh")


def qk_target(bundle: CriticBundle, k: int, batch: ChunkBatch, gamma: float, bootstrap: str = "vh", candidates=None):
    _, _, ret, s_next, mask = batch.prefix(k, gamma)
    if bootstrap == "vh":
        boot = bundle.v_value(bundle.h, s_next, target=True)
    elif bootstrap == "v1":
        boot = bundle.v_value(1, s_next, target=True)
    elif bootstrap == "qh":
        if candidates is None:
            raise ValueError("Q^h bootstrap needs candidates at s_{t+k}")
        boot = emaq_target(bundle, s_next, candidates)
    else:
        raise ValueError(f"unknown bootstrap {bootstrap!r}; choose from {BOOTSTRAPS}")
    return ret + gamma**k * mask * boot


def qk_loss(bundle: CriticBundle, k: int, batch: ChunkBatch, gamma: float, bootstrap: str = "vh", candidates=None):
    """Squared k-step TD error of a partial critic, bootstrapped from a shadow value."""
    if k not in bundle.scales or (k == bundle.h and bootstrap == "vh"):
        raise ValueError(f"partial critic loss needs k in {bundle.scales.partial()}, got {k}")
    _check_len(batch, k)
    y = qk_target(bundle, k, batch, gamma, bootstrap, candidates)
    s = batch.states[:, 0]
    return _regress(bundle.q[k], bundle.encoder.q_input(s, batch.actions[:, :k]), y, _weights(batch))


def vk_loss(bundle: CriticBundle, k: int, batch: ChunkBatch, kappa: float):
    """Expectile regression of V^k onto the shadow partial critic at data prefixes."""
    if k not in bundle.scales:
        raise ValueError(f"scale {k} not in {bundle.scales}")
    _check_len(batch, k)
    s = batch.states[:, 0]
    q = bundle.q_value(k, s, batch.actions[:, :k], target=True)
    return _expectile_fit(bundle.v[k], bundle.encoder.v_input(s), q, _weights(batch), kappa)
