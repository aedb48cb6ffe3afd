"""Chunk-size selection from multi-scale critics.

Scores are laid out as ``(B, |K|, N)``: a batch of states, one row per scale
and one column per candidate h-chunk. The prefix of candidate ``i`` scored at
scale ``k`` is always ``candidates[:, i, :k]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .critics import CriticBundle
from .mdp import ScaleSet

EPS_Z = 1e-6
TIE_TOL = 1e-9
VARIANTS = ("aqc", "aqc_noz", "raw_q", "discount_corrected", "random")


@dataclass
class ScoreMatrix:
    scales: ScaleSet
    scores: np.ndarray  # (B, |K|, N) raw scores
    normalized: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    eps_z: float = EPS_Z

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim == 2:
            self.scores = self.scores[None]
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


@dataclass
class SelectionResult:
    k_star: np.ndarray  # (B,)
    chunk_index: np.ndarray  # (B,)
    chunks: list  # per row: the k_star-prefix of the chosen candidate
    raw: np.ndarray  # (B, |K|, N)
    normalized: np.ndarray  # (B, |K|, N)

    @property
    def chunk(self):
        return self.chunks[0]


def critic_scores(bundle: CriticBundle, states, candidates, transform) -> ScoreMatrix:
    """Apply ``transform(k, q, states)`` to ensemble-min Q^k of every candidate prefix."""
    candidates = np.asarray(candidates)
    B, N = candidates.shape[:2]
    if candidates.shape[2] != bundle.h:
        raise ValueError(f"candidates must have length {bundle.h}")
    states = np.asarray(states)
    s_rep = np.repeat(states, N, axis=0)
    flat = candidates.reshape(B * N, *candidates.shape[2:])
    rows = []
    for k in bundle.scales:
        q = bundle.q_value(k, s_rep, flat).reshape(B, N)
        rows.append(transform(k, q, states))
    return ScoreMatrix(bundle.scales, np.stack(rows, axis=1))


def advantage_scores(bundle: CriticBundle, states, candidates, gamma: float, scales: ScaleSet | None = None) -> ScoreMatrix:
    """``(Q^k(s, prefix_k) - V^k(s)) / gamma**k`` for every scale and candidate."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if scales is not None and tuple(scales) != tuple(bundle.scales):
        missing = [k for k in scales if k not in bundle.q]
        if missing:
            raise KeyError(f"no critic heads for scales {missing}")
    return critic_scores(bundle, states, candidates, lambda k, q, s: (q - bundle.v_value(k, s)[:, None]) / gamma**k)


def zscore(scores: np.ndarray, eps_z: float = EPS_Z):
    """Population z-scores over the candidate axis; constant rows map to exactly zero."""
    mean = scores.mean(-1, keepdims=True)
    std = scores.std(-1, keepdims=True)
    z = (scores - mean) / (std + eps_z)
    flat = np.ptp(scores, axis=-1, keepdims=True) == 0
    return np.where(flat, 0.0, z), mean[..., 0], std[..., 0]


def _argmax_tiebreak(values: np.ndarray):
    """Global argmax over (k, i) per batch row; near-ties go to larger k, then lower i."""
    B, K, N = values.shape
    top = values.reshape(B, -1).max(1)
    near = values >= (top - TIE_TOL)[:, None, None]
    # Reverse the scale axis so the first hit in row-major order has the largest k.
    flat = near[:, ::-1, :].reshape(B, -1).argmax(1)
    k_idx = K - 1 - flat // N
    return k_idx, flat % N


def _result(matrix: ScoreMatrix, normalized: np.ndarray, candidates) -> SelectionResult:
    k_idx, i_idx = _argmax_tiebreak(normalized)
    ks = np.asarray(matrix.scales.scales)[k_idx]
    chunks = None
    if candidates is not None:
        candidates = np.asarray(candidates)
        chunks = [candidates[b, i_idx[b], : ks[b]] for b in range(len(ks))]
    return SelectionResult(ks, i_idx, chunks, matrix.scores, normalized)


def zscore_and_select(matrix: ScoreMatrix, candidates=None) -> SelectionResult:
    """z-score each scale's row, then take the global argmax. With one candidate, compare raw scores."""
    if matrix.scores.shape[-1] == 1:
        normalized = matrix.scores.copy()
    else:
        normalized, matrix.mean, matrix.std = zscore(matrix.scores, matrix.eps_z)
    matrix.normalized = normalized
    return _result(matrix, normalized, candidates)


def direct_select(matrix: ScoreMatrix, candidates=None) -> SelectionResult:
    """Argmax of the raw scores, without normalization."""
    matrix.normalized = matrix.scores
    return _result(matrix, matrix.scores, candidates)


def raw_q_select(bundle: CriticBundle, states, candidates) -> SelectionResult:
    m = critic_scores(bundle, states, candidates, lambda k, q, s: q)
    return direct_select(m, candidates)


def discount_corrected_select(bundle: CriticBundle, states, candidates, gamma: float) -> SelectionResult:
    m = critic_scores(bundle, states, candidates, lambda k, q, s: q / gamma**k)
    return direct_select(m, candidates)


def random_select(scales: ScaleSet, candidates, rng: np.random.Generator) -> SelectionResult:
    candidates = np.asarray(candidates)
    B, N = candidates.shape[:2]
    K = len(scales)
    k_idx = rng.integers(K, size=B)
    i_idx = rng.integers(N, size=B)
    ks = np.asarray(scales.scales)[k_idx]
    zeros = np.zeros((B, K, N))
    chunks = [candidates[b, i_idx[b], : ks[b]] for b in range(B)]
    return SelectionResult(ks, i_idx, chunks, zeros, zeros)


def fixed_select(bundle: CriticBundle, k: int, states, candidates) -> SelectionResult:
    """Best-of-N under Q^k, always executing k actions."""
    candidates = np.asarray(candidates)
    B, N = candidates.shape[:2]
    s_rep = np.repeat(np.asarray(states), N, axis=0)
    flat = candidates.reshape(B * N, *candidates.shape[2:])
    q = bundle.q_value(k, s_rep, flat).reshape(B, N)
    i_idx = np.argmax(q >= q.max(1, keepdims=True) - TIE_TOL, axis=1)
    chunks = [candidates[b, i_idx[b], :k] for b in range(B)]
    return SelectionResult(np.full(B, k), i_idx, chunks, q[:, None, :], q[:, None, :])


def parse_variant(variant: str) -> tuple[str, int | None]:
    if variant.startswith("fixed:"):
        return "fixed", int(variant.split(":", 1)[1])
    if variant not in VARIANTS:
        raise ValueError(f"unknown selector {variant!r}")
    return variant, None


def select(variant: str, bundle: CriticBundle, states, candidates, gamma: float, rng: np.random.Generator) -> SelectionResult:
    kind, k = parse_variant(variant)
    if kind == "aqc":
        return zscore_and_select(advantage_scores(bundle, states, candidates, gamma), candidates)
    if kind == "aqc_noz":
        return direct_select(advantage_scores(bundle, states, candidates, gamma), candidates)
    if kind == "raw_q":
        return raw_q_select(bundle, states, candidates)
    if kind == "discount_corrected":
        return discount_corrected_select(bundle, states, candidates, gamma)
    if kind == "random":
        return random_select(bundle.scales, candidates, rng)
    if k not in bundle.scales:
        raise ValueError(f"fixed scale {k} not in {bundle.scales}")
    return fixed_select(bundle, k, states, candidates)
