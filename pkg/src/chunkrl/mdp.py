"""Trajectories, chunked transitions and discounted partial returns.

Every learner in the package consumes data through :func:`extract_chunks` or
:func:`chunk_arrays`. Both walk the same start indices: stride-``stride`` starts
that fit inside an episode, plus, for episodes that end in a true terminal,
tail chunks that are truncated at the terminal step (mask 0, missing rewards
treated as zero, missing actions padded by repeating the last real action).
Episodes cut by a time limit contribute no tail chunks because there is no
state to bootstrap from.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

UNIVERSAL_SCALES = (1, 5, 10, 25)
DATASET_FORMAT_VERSION = 1


def discounted_partial_return(rewards: Sequence[float], gamma: float) -> float:
    """Sum of ``gamma**j * rewards[j]``, accumulated left to right."""
    if len(rewards) == 0:
        raise ValueError("rewards must be non-empty")
    total = 0.0
    scale = 1.0
    for r in rewards:
        r = float(r)
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r!r}")
        total += scale * r
        scale *= gamma
    return total


@dataclass(frozen=True)
class ScaleSet:
    """Sorted candidate chunk sizes; the largest one is the critic horizon."""

    scales: tuple[int, ...]

    def __post_init__(self):
        ks = tuple(int(k) for k in self.scales)
        if not ks:
            raise ValueError("ScaleSet must be non-empty")
        if any(k < 1 for k in ks):
            raise ValueError(f"chunk sizes must be positive, got {ks}")
        if len(set(ks)) != len(ks) or tuple(sorted(ks)) != ks:
            raise ValueError(f"chunk sizes must be sorted and distinct, got {ks}")
        object.__setattr__(self, "scales", ks)

    @classmethod
    def from_horizon(cls, h: int, universe: Iterable[int] = UNIVERSAL_SCALES) -> "ScaleSet":
        ks = sorted({k for k in universe if k <= h} | {h})
        return cls(tuple(ks))

    @property
    def h(self) -> int:
        return self.scales[-1]

    @property
    def k_min(self) -> int:
        return self.scales[0]

    def partial(self) -> tuple[int, ...]:
        """Scales other than the horizon."""
        return self.scales[:-1]

    def __iter__(self):
        return iter(self.scales)

    def __len__(self):
        return len(self.scales)

    def __contains__(self, k):
        return k in self.scales

    def index(self, k: int) -> int:
        return self.scales.index(k)


@dataclass(frozen=True)
class Trajectory:
    """One episode. ``terminal`` is True only when the episode hit a true terminal."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool

    def __post_init__(self):
        states = np.asarray(self.states)
        actions = np.asarray(self.actions)
        rewards = np.asarray(self.rewards, dtype=float)
        if len(states) != len(actions) + 1:
            raise ValueError(
                f"need len(states) == len(actions) + 1, got {len(states)} and {len(actions)}"
            )
        if len(rewards) != len(actions):
            raise ValueError("rewards and actions must have equal length")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        if states.dtype.kind == "f" and not np.all(np.isfinite(states)):
            raise ValueError("states must be finite")
        if actions.dtype.kind == "f" and not np.all(np.isfinite(actions)):
            raise ValueError("actions must be finite")
        for arr in (states, actions, rewards):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "terminal", bool(self.terminal))

    def __len__(self):
        return len(self.actions)

    @property
    def discrete(self) -> bool:
        return self.states.dtype.kind in "iu"


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @property
    def discrete(self) -> bool:
        return bool(self.trajectories) and self.trajectories[0].discrete

    def save(self, path: str | Path) -> None:
        save_dataset(self, path)


@dataclass(frozen=True)
class ChunkedTransition:
    state: Any
    chunk: np.ndarray
    partial_return: float
    next_state: Any
    mask: float
    # Provenance: (episode index, start step). Used to prove chunks stay inside one episode.
    episode: int = -1
    start: int = -1
    length: int = 0  # number of real (non-padded) actions


def chunk_starts(T: int, k: int, terminal: bool, stride: int = 1) -> list[int]:
    """Start indices of every chunk of length ``k`` extracted from a length-``T`` episode."""
    if k < 1 or stride < 1:
        raise ValueError("k and stride must be >= 1")
    last = T - 1 if terminal else T - k
    return list(range(0, last + 1, stride)) if last >= 0 else []


def _pad_index(T: int, t: int, k: int) -> np.ndarray:
    """Action indices t..t+k-1 clipped to the last real action."""
    return np.minimum(np.arange(t, t + k), T - 1)


def extract_chunks(
    dataset: Dataset | Sequence[Trajectory], k: int, gamma: float, stride: int = 1
) -> list[ChunkedTransition]:
    """One ChunkedTransition per valid start index of every trajectory."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    trajs = list(dataset)
    out: list[ChunkedTransition] = []
    for ep, traj in enumerate(trajs):
        T = len(traj)
        for t in chunk_starts(T, k, traj.terminal, stride):
            n_real = min(k, T - t)
            ret = discounted_partial_return(traj.rewards[t : t + n_real], gamma)
            mask = 0.0 if (traj.terminal and t + k >= T) else 1.0
            out.append(
                ChunkedTransition(
                    state=_state_item(traj.states[t]),
                    chunk=traj.actions[_pad_index(T, t, k)],
                    partial_return=ret,
                    next_state=_state_item(traj.states[t + n_real]),
                    mask=mask,
                    episode=ep,
                    start=t,
                    length=n_real,
                )
            )
    if trajs and not out:
        warnings.warn(f"chunk size {k} exceeds every episode; no transitions extracted")
    return out


def _state_item(s):
    return int(s) if np.ndim(s) == 0 else np.asarray(s)


@dataclass
class ChunkBatch:
    """Struct-of-arrays view of h-step chunks.

    ``states[:, j]`` is the state after ``j`` actions (held at the terminal
    state once the episode has ended), ``rewards[:, j]`` the j-th reward (zero
    after termination) and ``alive[:, j]`` is False once a terminal has been
    reached within the first ``j`` actions. Shorter prefixes are cut from the
    same rows, so every scale sees exactly the same starts.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    alive: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    @property
    def h(self) -> int:
        return self.rewards.shape[1]

    def take(self, idx) -> "ChunkBatch":
        w = None if self.weights is None else self.weights[idx]
        return ChunkBatch(self.states[idx], self.actions[idx], self.rewards[idx], self.alive[idx], w)

    def prefix(self, k: int, gamma: float):
        """(s_t, a_{t:t+k}, R_{t:t+k}, s_{t+k}, mask_k) for the first ``k`` actions."""
        if not 1 <= k <= self.h:
            raise ValueError(f"prefix length {k} outside 1..{self.h}")
        disc = gamma ** np.arange(k)
        ret = self.rewards[:, :k] @ disc
        return (
            self.states[:, 0],
            self.actions[:, :k],
            ret,
            self.states[:, k],
            self.alive[:, k].astype(float),
        )

    @staticmethod
    def concatenate(batches: Sequence["ChunkBatch"]) -> "ChunkBatch":
        batches = [b for b in batches if len(b)]
        ws = [b.weights for b in batches]
        w = None if any(x is None for x in ws) else np.concatenate(ws)
        return ChunkBatch(
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.rewards for b in batches]),
            np.concatenate([b.alive for b in batches]),
            w,
        )


def chunk_arrays(trajs: Iterable[Trajectory], h: int, stride: int = 1) -> ChunkBatch:
    """All h-chunks of the given trajectories as a :class:`ChunkBatch`."""
    S, A, R, L = [], [], [], []
    for traj in trajs:
        T = len(traj)
        starts = chunk_starts(T, h, traj.terminal, stride)
        if not starts:
            continue
        starts = np.asarray(starts)
        offs = np.arange(h + 1)
        st_idx = np.minimum(starts[:, None] + offs[None, :], T)
        act_idx = np.minimum(starts[:, None] + offs[None, :-1], T - 1)
        step = starts[:, None] + offs[None, :-1]
        real = step < T
        rew = np.where(real, traj.rewards[np.minimum(step, T - 1)], 0.0)
        alive = ~(traj.terminal & (starts[:, None] + offs[None, :] >= T))
        S.append(traj.states[st_idx])
        A.append(traj.actions[act_idx])
        R.append(rew)
        L.append(alive)
    if not S:
        return ChunkBatch(np.zeros((0, h + 1)), np.zeros((0, h)), np.zeros((0, h)), np.zeros((0, h + 1), bool))
    return ChunkBatch(np.concatenate(S), np.concatenate(A), np.concatenate(R), np.concatenate(L))


# ---------------------------------------------------------------------------
# Serialization: line-delimited JSON, one header record then one record per
# trajectory. See FORMATS.md.


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"type": "header", "version": DATASET_FORMAT_VERSION, **dataset.metadata}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for traj in dataset.trajectories:
            rec = {
                "type": "trajectory",
                "states": traj.states.tolist(),
                "actions": traj.actions.tolist(),
                "rewards": traj.rewards.tolist(),
                "terminal": traj.terminal,
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    trajs = []
    meta: dict[str, Any] = {}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                if rec.get("version") != DATASET_FORMAT_VERSION:
                    raise ValueError(f"unsupported dataset version {rec.get('version')!r}")
                meta = {k: v for k, v in rec.items() if k not in ("type", "version")}
            elif kind == "trajectory":
                discrete = meta.get("discrete", True)
                dtype = np.int64 if discrete else float
                trajs.append(
                    Trajectory(
                        np.asarray(rec["states"], dtype=dtype),
                        np.asarray(rec["actions"], dtype=dtype),
                        np.asarray(rec["rewards"], dtype=float),
                        rec["terminal"],
                    )
                )
            else:
                raise ValueError(f"line {lineno}: unknown record type {kind!r}")
    return Dataset(trajs, meta)
