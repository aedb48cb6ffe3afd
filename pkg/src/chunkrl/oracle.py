"""Exact dynamic programming on tabular environments.

Chunks of length ``k`` over ``A`` actions are indexed by an integer code in
base ``A`` with the first action as the most significant digit, so
``code // A**(k - m)`` is the code of the length-``m`` prefix.

The behavior chunk distribution follows the data convention used by
:func:`chunkrl.mdp.chunk_arrays`: once an episode terminates inside a chunk,
the remaining slots repeat the last real action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .mdp import ChunkBatch, Dataset, ScaleSet, chunk_arrays

DEFAULT_NODE_BUDGET = 4_000_000
SUPPORT_TOL = 1e-12
TIE_TOL = 1e-12


def _require_discrete(env) -> None:
    if not getattr(env, "discrete", False) or not hasattr(env, "transition_tensor"):
        raise TypeError(f"{type(env).__name__} is not a tabular environment")


def encode_chunks(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """(..., k) integer actions -> (...,) chunk codes."""
    actions = np.asarray(actions, dtype=np.int64)
    k = actions.shape[-1]
    weights = n_actions ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return actions @ weights


def decode_chunk(code: int, k: int, n_actions: int) -> np.ndarray:
    out = np.empty(k, dtype=np.int64)
    for j in range(k - 1, -1, -1):
        code, out[j] = divmod(int(code), n_actions)
    return out


def value_iteration(env, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Optimal values under step-by-step re-querying. Returns ``(V, Q)``."""
    _require_discrete(env)
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    P = env.transition_tensor(0)
    R = env.reward_tensor()
    r_exp = (P * R).sum(-1)
    V = np.zeros(env.n_states)
    for _ in range(max_iter):
        Q = r_exp + gamma * P @ V
        V_new = Q.max(1)
        resid = np.max(np.abs(V_new - V))
        V = V_new
        if resid <= tol:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    Q = r_exp + gamma * P @ V
    return V, Q


def greedy_actions(Q: np.ndarray) -> np.ndarray:
    """Argmax per row; exact ties go to the lowest action index."""
    return np.argmax(Q >= Q.max(1, keepdims=True) - TIE_TOL, axis=1)


def k_step_chunk_values(
    env, V: np.ndarray, k: int, gamma: float, node_budget: int = DEFAULT_NODE_BUDGET
) -> np.ndarray:
    """Q[s, code]: expected open-loop k-step return of each chunk plus ``gamma**k * V``."""
    _require_discrete(env)
    S, A = env.n_states, env.n_actions
    if k < 1:
        raise ValueError("k must be >= 1")
    if S * A**k > node_budget:
        raise MemoryError(f"chunk table of {S}x{A}^{k} entries exceeds the node budget {node_budget}")
    R = env.reward_tensor()
    W = np.asarray(V, dtype=float)[:, None]
    # Build from the last action backwards; the m-th from last action is taken k-m steps open.
    for m in range(1, k + 1):
        P = env.transition_tensor(k - m)
        r_exp = (P * R).sum(-1)  # (S, A)
        cont = np.einsum("sat,tc->sac", P, W)  # (S, A, A^(m-1))
        W = (r_exp[:, :, None] + gamma * cont).reshape(S, A**m)
    return W


def behavior_chunk_probs(env, policy: np.ndarray, k: int, node_budget: int = DEFAULT_NODE_BUDGET) -> np.ndarray:
    """Exact P(a_{t:t+k} = code | s_t = s) for a Markov behavior ``policy[s, a]``.

    The behavior re-queries every step. After a terminal the remaining actions
    repeat the last real action. Rows of terminal states are uniform.
    """
    _require_discrete(env)
    S, A = env.n_states, env.n_actions
    if S * A**k > node_budget:
        raise MemoryError("behavior chunk table exceeds the node budget")
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (S, A) or np.any(pi < 0) or not np.allclose(pi.sum(1), 1.0):
        raise ValueError("policy must be an (S, A) row-stochastic table")
    P = env.transition_tensor(0)
    term = env.terminal_mask()
    P_live = P * (~term)[None, None, :]
    p_term = P[:, :, term].sum(-1)  # (S, A)
    F = np.ones((S, 1))
    for m in range(1, k + 1):
        # F has suffix length m-1; prepend one action.
        n_suffix = A ** (m - 1)
        repeat = np.zeros((A, n_suffix))
        for a in range(A):
            repeat[a, encode_chunks(np.full(m - 1, a), A) if m > 1 else 0] = 1.0
        nxt = np.einsum("sat,tc->sac", P_live, F) + p_term[:, :, None] * repeat[None]
        F = (pi[:, :, None] * nxt).reshape(S, A**m)
    F[term] = 1.0 / A**k
    return F


def empirical_chunk_probs(dataset: Dataset | ChunkBatch, n_states: int, n_actions: int, k: int):
    """Empirical P_D(chunk | s) and the per-state count of chunk starts."""
    batch = dataset if isinstance(dataset, ChunkBatch) else chunk_arrays(dataset, k)
    if batch.h < k:
        raise ValueError("batch chunks shorter than k")
    s = batch.states[:, 0].astype(np.int64)
    codes = encode_chunks(batch.actions[:, :k], n_actions)
    counts = np.zeros((n_states, n_actions**k))
    np.add.at(counts, (s, codes), 1.0)
    n = counts.sum(1)
    probs = np.divide(counts, n[:, None], out=np.zeros_like(counts), where=n[:, None] > 0)
    return probs, n


def expectile(values: np.ndarray, weights: np.ndarray, kappa: float, tol: float = 1e-10) -> np.ndarray:
    """Row-wise kappa-expectile of weighted discrete distributions, by bisection.

    Solves ``kappa * E[(x - v)_+] = (1 - kappa) * E[(v - x)_+]`` on the
    bracket ``[min x, max x]`` over each row's support.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    x = np.atleast_2d(np.asarray(values, dtype=float))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    support = w > SUPPORT_TOL
    if not np.all(support.any(1)):
        raise ValueError("empty support in at least one row")
    w = np.where(support, w, 0.0)
    lo = np.where(support, x, np.inf).min(1)
    hi = np.where(support, x, -np.inf).max(1)
    n_iter = int(np.ceil(np.log2(max(np.max(hi - lo), tol) / tol))) + 2
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        u = x - mid[:, None]
        g = (w * np.where(u > 0, kappa * u, (1 - kappa) * u)).sum(1)
        lo = np.where(g > 0, mid, lo)
        hi = np.where(g > 0, hi, mid)
    return 0.5 * (lo + hi)


def behavior_baseline(pi_beta_chunks: np.ndarray, Q_k: np.ndarray, kappa: float) -> np.ndarray:
    return expectile(Q_k, pi_beta_chunks, kappa)


@dataclass
class OracleTables:
    gamma: float
    kappa: float
    scales: ScaleSet
    V_star: np.ndarray
    Q_star: np.ndarray
    Q_k: dict[int, np.ndarray]
    pi_beta_chunks: dict[int, np.ndarray]
    V_k_beta: dict[int, np.ndarray]
    A_bar: np.ndarray = field(default=None)  # (S, |K|)
    best_chunk: dict[int, np.ndarray] = field(default_factory=dict)
    Delta: np.ndarray = field(default=None)
    k_dagger: np.ndarray = field(default=None)

    def to_json(self) -> dict:
        ks = list(self.scales)
        return {
            "gamma": self.gamma,
            "kappa": self.kappa,
            "scales": ks,
            "V_star": self.V_star.tolist(),
            "Q_star": self.Q_star.tolist(),
            "V_k_beta": {str(k): self.V_k_beta[k].tolist() for k in ks},
            "A_bar": {str(k): self.A_bar[:, i].tolist() for i, k in enumerate(ks)},
            "best_chunk": {str(k): self.best_chunk[k].tolist() for k in ks},
            "Delta": [None if not math.isfinite(d) else float(d) for d in self.Delta],
            "k_dagger": self.k_dagger.tolist(),
        }


def advantage_gap_and_selector(tables: OracleTables, scales: ScaleSet | None = None):
    """Best restricted advantage per scale, separability gap and oracle scale.

    Returns ``(A_bar, Delta, k_dagger, best_chunk)``. Ties within ``TIE_TOL``
    go to the largest scale; the gap is clamped at zero. With a single scale
    the gap is ``+inf``.
    """
    scales = scales or tables.scales
    ks = list(scales)
    S = tables.V_star.shape[0]
    A_bar = np.empty((S, len(ks)))
    best = {}
    for i, k in enumerate(ks):
        support = tables.pi_beta_chunks[k] > SUPPORT_TOL
        q = np.where(support, tables.Q_k[k], -np.inf)
        best[k] = np.argmax(q, axis=1)
        A_bar[:, i] = (q.max(1) - tables.V_k_beta[k]) / tables.gamma**k
    if len(ks) < 2:
        return A_bar, np.full(S, np.inf), np.full(S, ks[0]), best
    top = A_bar.max(1, keepdims=True)
    near = A_bar >= top - TIE_TOL
    idx = len(ks) - 1 - np.argmax(near[:, ::-1], axis=1)
    k_dagger = np.asarray(ks)[idx]
    others = A_bar.copy()
    others[np.arange(S), idx] = -np.inf
    Delta = np.maximum(A_bar[np.arange(S), idx] - others.max(1), 0.0)
    return A_bar, Delta, k_dagger, best


def build_oracle_tables(
    env,
    gamma: float,
    scales: ScaleSet,
    kappa: float,
    behavior: np.ndarray | None = None,
    chunk_probs: Mapping[int, np.ndarray] | None = None,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> OracleTables:
    """All oracle tables for one (env, gamma, scales, kappa).

    Chunk distributions come from an exact Markov ``behavior`` table or are
    passed in directly (e.g. empirical frequencies).
    """
    if (behavior is None) == (chunk_probs is None):
        raise ValueError("pass exactly one of behavior or chunk_probs")
    V, Q = value_iteration(env, gamma)
    Qk, probs, Vb = {}, {}, {}
    for k in scales:
        Qk[k] = k_step_chunk_values(env, V, k, gamma, node_budget)
        probs[k] = behavior_chunk_probs(env, behavior, k, node_budget) if behavior is not None else chunk_probs[k]
        Vb[k] = behavior_baseline(probs[k], Qk[k], kappa)
    t = OracleTables(gamma, kappa, scales, V, Q, Qk, probs, Vb)
    t.A_bar, t.Delta, t.k_dagger, t.best_chunk = advantage_gap_and_selector(t)
    return t


# ---------------------------------------------------------------------------
# Meta-MDP policy evaluation


@dataclass(frozen=True)
class MetaPolicySpec:
    """Chunk policy: a fixed scale, or a per-state scale map, with greedy chunks over the support."""

    fixed_k: int | None = None
    k_map: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.fixed_k is None) == (self.k_map is None):
            raise ValueError("give exactly one of fixed_k or k_map")

    @classmethod
    def fixed(cls, k: int) -> "MetaPolicySpec":
        return cls(fixed_k=int(k))

    @classmethod
    def adaptive(cls, k_map) -> "MetaPolicySpec":
        return cls(k_map=tuple(int(k) for k in k_map))

    def scale_at(self, s: int) -> int:
        return self.fixed_k if self.fixed_k is not None else self.k_map[s]


def open_loop_kernel(env, chunks: np.ndarray, gamma: float):
    """Per-state open-loop rollout of ``chunks[s]`` (shape (S, k)).

    Returns the expected discounted reward (S,) and the distribution of the
    state after k steps (S, S).
    """
    S = env.n_states
    R = env.reward_tensor()
    D = np.eye(S)
    r = np.zeros(S)
    for j in range(chunks.shape[1]):
        P = env.transition_tensor(j)
        a = chunks[:, j]
        r_exp = (P * R).sum(-1)  # (S_u, A)
        r += gamma**j * (D * r_exp[:, a].T).sum(1)
        # Row s propagates with its own action a[s] from every intermediate state u.
        D = np.einsum("su,sut->st", D, P[:, a, :].transpose(1, 0, 2))
    return r, D


def evaluate_meta_policy(env, spec: MetaPolicySpec, tables: OracleTables, gamma: float | None = None) -> np.ndarray:
    """Exact value of the chunk policy by solving its linear fixed point."""
    _require_discrete(env)
    gamma = tables.gamma if gamma is None else gamma
    S, A = env.n_states, env.n_actions
    ks = np.array([spec.scale_at(s) for s in range(S)])
    r = np.zeros(S)
    M = np.zeros((S, S))
    for k in np.unique(ks):
        k = int(k)
        if k not in tables.best_chunk:
            raise KeyError(f"no oracle tables for scale {k}")
        rows = np.flatnonzero(ks == k)
        chunks = np.stack([decode_chunk(c, k, A) for c in tables.best_chunk[k]])
        r_k, D_k = open_loop_kernel(env, chunks, gamma)
        r[rows] = r_k[rows]
        M[rows] = gamma**k * D_k[rows]
    rho = np.max(np.abs(np.linalg.eigvals(M)))
    if rho >= 1.0 - 1e-12:
        raise ValueError(f"evaluation operator has spectral radius {rho:.6f} >= 1")
    return np.linalg.solve(np.eye(S) - M, r)


# ---------------------------------------------------------------------------
# Open-loop consistency


@dataclass
class TVReport:
    tv: np.ndarray  # NaN where skipped
    skipped: np.ndarray  # bool

    @property
    def max(self) -> float:
        v = self.tv[~self.skipped]
        return float(v.max()) if v.size else 0.0

    @property
    def mean(self) -> float:
        v = self.tv[~self.skipped]
        return float(v.mean()) if v.size else 0.0


def _open_loop_next(env, probs: np.ndarray, k: int) -> np.ndarray:
    """Distribution of s_{t+k} when a chunk drawn from ``probs[s]`` is replayed blind."""
    S, A = env.n_states, env.n_actions
    out = np.zeros((S, S))
    for code in np.flatnonzero(probs.max(0) > 0):
        chunk = np.tile(decode_chunk(code, k, A), (S, 1))
        _, D = open_loop_kernel(env, chunk, 0.5)
        out += probs[:, code, None] * D
    return out


def aolc_tv_check(env, dataset: Dataset, kappa_fn: Callable[[int], int], min_count: int = 50) -> TVReport:
    """TV distance between data and open-loop replay of s_{t+kappa(s)} given s_t."""
    _require_discrete(env)
    S = env.n_states
    ks = np.array([int(kappa_fn(s)) for s in range(S)])
    tv = np.full(S, np.nan)
    skipped = np.ones(S, bool)
    term = env.terminal_mask()
    for k in np.unique(ks):
        k = int(k)
        batch = chunk_arrays(dataset, k)
        probs, n = empirical_chunk_probs(batch, S, env.n_actions, k)
        emp = np.zeros((S, S))
        np.add.at(emp, (batch.states[:, 0].astype(int), batch.states[:, k].astype(int)), 1.0)
        emp = np.divide(emp, n[:, None], out=np.zeros_like(emp), where=n[:, None] > 0)
        replay = _open_loop_next(env, probs, k)
        for s in np.flatnonzero((ks == k) & (n >= min_count) & ~term):
            tv[s] = 0.5 * np.abs(emp[s] - replay[s]).sum()
            skipped[s] = False
    return TVReport(tv, skipped)


def aolc_tv_exact(env, policy: np.ndarray, kappa_fn: Callable[[int], int]) -> np.ndarray:
    """Analytic counterpart of :func:`aolc_tv_check` for a Markov behavior."""
    S = env.n_states
    P = env.transition_tensor(0)
    P_pi = np.einsum("sa,sat->st", policy, P)
    out = np.zeros(S)
    ks = np.array([int(kappa_fn(s)) for s in range(S)])
    for k in np.unique(ks):
        k = int(k)
        closed = np.linalg.matrix_power(P_pi, k)
        replay = _open_loop_next(env, behavior_chunk_probs(env, policy, k), k)
        rows = ks == k
        out[rows] = 0.5 * np.abs(closed[rows] - replay[rows]).sum(1)
    out[env.terminal_mask()] = 0.0
    return out
