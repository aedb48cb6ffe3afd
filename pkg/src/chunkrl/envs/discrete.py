"""Tabular sparse-reward environments.

Each environment describes its dynamics once, through ``outcomes(s, a, t_open)``,
a list of ``(prob, next_state)`` pairs. ``t_open`` counts the actions already
executed since the agent last observed the state (0 when re-querying every
step). Both sampled rollouts and the dense tensors used by the exact oracle are
built from that single description, so the two cannot drift apart.

Rewards follow the sparse convention: -1 for every step that does not land on
the goal, 0 for the step that reaches it. The goal is absorbing with reward 0.
"""

from __future__ import annotations

import numpy as np


class DiscreteEnv:
    n_states: int
    n_actions: int
    goal: int
    start: int
    T_max: int
    name = "discrete"

    def __init__(self):
        self._rng = np.random.default_rng(0)
        self._state: int | None = None
        self._t = 0
        self._t_open = 0
        self.done = True
        self.reached_goal = False
        self.last_executed: int | None = None

    # -- dynamics description -------------------------------------------------
    def outcomes(self, s: int, a: int, t_open: int) -> list[tuple[float, int]]:
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError

    def distance(self, s1: int, s2: int) -> float:
        """Native metric used for nearest-state lookups."""
        raise NotImplementedError

    def region(self, s: int) -> str:
        return "free"

    @property
    def discrete(self) -> bool:
        return True

    # -- dense tensors --------------------------------------------------------
    def transition_tensor(self, t_open: int = 0) -> np.ndarray:
        """P[s, a, s'] for an action taken ``t_open`` steps after the last observation."""
        return _tensor_cache(self, self.open_loop_key(t_open))

    def open_loop_key(self, t_open: int) -> int:
        """Smallest t_open with identical dynamics; lets the tensor cache stay small."""
        return t_open

    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_states, bool)
        m[self.goal] = True
        return m

    def reward_tensor(self) -> np.ndarray:
        """R[s, a, s']: -1 unless the step lands on (or starts from) a terminal."""
        R = -np.ones((self.n_states, self.n_actions, self.n_states))
        term = self.terminal_mask()
        R[:, :, term] = 0.0
        R[term] = 0.0
        return R

    def _dense(self, t_open: int) -> np.ndarray:
        S, A = self.n_states, self.n_actions
        P = np.zeros((S, A, S))
        term = self.terminal_mask()
        for s in range(S):
            for a in range(A):
                if term[s]:
                    P[s, a, s] = 1.0
                    continue
                for p, s2 in self.outcomes(s, a, t_open):
                    P[s, a, s2] += p
        if not np.allclose(P.sum(-1), 1.0, atol=1e-12):
            raise AssertionError("transition rows must sum to one")
        return P

    # -- episodic interface ---------------------------------------------------
    def reset(self, seed: int | np.random.SeedSequence | None = None, state: int | None = None) -> int:
        self._rng = np.random.default_rng(seed)
        self._state = self.start if state is None else int(state)
        self._t = 0
        self._t_open = 0
        self.done = False
        self.reached_goal = False
        self.last_executed = None
        return self._state

    @property
    def state(self) -> int:
        if self._state is None:
            raise RuntimeError("call reset() first")
        return self._state

    def step(self, action: int, requery: bool = True) -> tuple[int, float, bool]:
        """Advance one step. ``requery=False`` marks the action as part of an open-loop chunk."""
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {action!r} outside 0..{self.n_actions - 1}")
        if requery:
            self._t_open = 0
        s = self.state
        probs, nexts = zip(*self.outcomes(s, a, self._t_open))
        s2 = int(nexts[self._rng.choice(len(probs), p=np.asarray(probs))])
        self._state = s2
        self._t += 1
        self._t_open += 1
        self.reached_goal = s2 == self.goal
        reward = 0.0 if self.reached_goal else -1.0
        self.done = self.reached_goal or self._t >= self.T_max
        return s2, reward, self.done


def _tensor_cache(env: DiscreteEnv, t_open: int) -> np.ndarray:
    cache = env.__dict__.setdefault("_P_cache", {})
    if t_open not in cache:
        P = env._dense(t_open)
        P.setflags(write=False)
        cache[t_open] = P
    return cache[t_open]


class ChainEnv(DiscreteEnv):
    """States 0..L-1 on a line, actions LEFT=0 / RIGHT=1, goal at L-1."""

    LEFT, RIGHT = 0, 1
    name = "chain"

    def __init__(self, L: int = 5, p_slip: float = 0.0, T_max: int | None = None):
        super().__init__()
        if L < 3:
            raise ValueError("chain length must be at least 3")
        if not 0.0 <= p_slip < 0.5:
            raise ValueError("p_slip must lie in [0, 0.5)")
        self.L = int(L)
        self.p_slip = float(p_slip)
        self.n_states = self.L
        self.n_actions = 2
        self.start = 0
        self.goal = self.L - 1
        self.T_max = int(T_max) if T_max is not None else 4 * self.L

    def _move(self, s: int, a: int) -> int:
        return min(s + 1, self.L - 1) if a == self.RIGHT else max(s - 1, 0)

    def outcomes(self, s, a, t_open):
        if self.p_slip == 0.0:
            return [(1.0, self._move(s, a))]
        return [(1.0 - self.p_slip, self._move(s, a)), (self.p_slip, self._move(s, 1 - a))]

    def open_loop_key(self, t_open):
        return 0

    def distance(self, s1, s2):
        return abs(int(s1) - int(s2))

    def params(self):
        return {"L": self.L, "p_slip": self.p_slip, "T_max": self.T_max}


class TwoPhaseGridEnv(DiscreteEnv):
    """Grid whose rightmost columns form a contact region around the goal.

    Corridor cells execute commands exactly. In a contact cell the command is
    replaced by a uniformly chosen different action with probability
    ``min(p_contact * (1 + t_open / tau_acc), p_max)``, so errors compound
    the longer the agent acts without looking.
    """

    RIGHT, UP, LEFT, DOWN = 0, 1, 2, 3
    MOVES = ((1, 0), (0, 1), (-1, 0), (0, -1))
    name = "grid"

    def __init__(
        self,
        W: int = 5,
        H: int = 5,
        contact_width: int = 2,
        p_contact: float = 0.3,
        tau_acc: float = 2.0,
        p_max: float = 0.6,
        start: tuple[int, int] | None = None,
        goal: tuple[int, int] | None = None,
        T_max: int | None = None,
    ):
        super().__init__()
        if not 0.0 < p_contact <= p_max <= 0.6:
            raise ValueError("need 0 < p_contact <= p_max <= 0.6")
        if tau_acc <= 0:
            raise ValueError("tau_acc must be positive")
        if not 1 <= contact_width < W:
            raise ValueError("contact region must leave at least one corridor column")
        self.W, self.H = int(W), int(H)
        self.contact_width = int(contact_width)
        self.p_contact = float(p_contact)
        self.tau_acc = float(tau_acc)
        self.p_max = float(p_max)
        sx, sy = start if start is not None else (0, self.H // 2)
        gx, gy = goal if goal is not None else (self.W - 1, self.H // 2)
        if gx < self.W - self.contact_width:
            raise ValueError("goal must lie inside the contact region")
        self.start = self.index(sx, sy)
        self.goal = self.index(gx, gy)
        self.n_states = self.W * self.H
        self.n_actions = 4
        self.T_max = int(T_max) if T_max is not None else 4 * (self.W + self.H)
        self.last_perturbed = False

    def index(self, x: int, y: int) -> int:
        if not (0 <= x < self.W and 0 <= y < self.H):
            raise ValueError(f"cell ({x}, {y}) outside the grid")
        return y * self.W + x

    def coords(self, s: int) -> tuple[int, int]:
        return s % self.W, s // self.W

    def in_contact(self, s: int) -> bool:
        return self.coords(s)[0] >= self.W - self.contact_width

    def region(self, s):
        return "contact" if self.in_contact(s) else "corridor"

    def perturb_prob(self, s: int, t_open: int) -> float:
        if not self.in_contact(s):
            return 0.0
        return min(self.p_contact * (1.0 + t_open / self.tau_acc), self.p_max)

    def _move(self, s: int, a: int) -> int:
        x, y = self.coords(s)
        dx, dy = self.MOVES[a]
        return self.index(min(max(x + dx, 0), self.W - 1), min(max(y + dy, 0), self.H - 1))

    def outcomes(self, s, a, t_open):
        p = self.perturb_prob(s, t_open)
        if p == 0.0:
            return [(1.0, self._move(s, a))]
        out = [(1.0 - p, self._move(s, a))]
        out += [(p / 3.0, self._move(s, b)) for b in range(4) if b != a]
        return out

    def open_loop_key(self, t_open):
        # Perturbation saturates at p_max; every later t_open shares a tensor.
        sat = int(np.ceil((self.p_max / self.p_contact - 1.0) * self.tau_acc))
        return min(int(t_open), max(sat, 0))

    def step(self, action, requery=True):
        # Sample the executed action explicitly so callers can observe perturbations.
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = int(action)
        if not 0 <= a < 4:
            raise ValueError(f"action {action!r} outside 0..3")
        if requery:
            self._t_open = 0
        s = self.state
        executed = a
        self.last_perturbed = False
        if self._rng.random() < self.perturb_prob(s, self._t_open):
            others = [b for b in range(4) if b != a]
            executed = others[int(self._rng.integers(3))]
            self.last_perturbed = True
        self.last_executed = executed
        s2 = self._move(s, executed)
        self._state = s2
        self._t += 1
        self._t_open += 1
        self.reached_goal = s2 == self.goal
        self.done = self.reached_goal or self._t >= self.T_max
        return s2, (0.0 if self.reached_goal else -1.0), self.done

    def distance(self, s1, s2):
        (x1, y1), (x2, y2) = self.coords(int(s1)), self.coords(int(s2))
        return abs(x1 - x2) + abs(y1 - y2)

    def params(self):
        return {
            "W": self.W,
            "H": self.H,
            "contact_width": self.contact_width,
            "p_contact": self.p_contact,
            "tau_acc": self.tau_acc,
            "p_max": self.p_max,
            "start": list(self.coords(self.start)),
            "goal": list(self.coords(self.goal)),
            "T_max": self.T_max,
        }


class TabularEnv(DiscreteEnv):
    """Tabular MDP given directly by tensors, for hand-built instances.

    ``P[s, a, s']`` and ``R[s, a, s']``; states in ``terminals`` are absorbing
    with zero reward. Dynamics ignore ``t_open``.
    """

    name = "tabular"

    def __init__(self, P, R, terminals, start: int = 0, T_max: int = 1000):
        super().__init__()
        P = np.asarray(P, dtype=float)
        R = np.asarray(R, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape:
            raise ValueError("need P and R of shape (S, A, S)")
        if not np.allclose(P.sum(-1), 1.0):
            raise ValueError("transition rows must sum to one")
        self.n_states, self.n_actions = P.shape[:2]
        self._P, self._R = P, R
        self.terminals = tuple(sorted(int(t) for t in terminals))
        self.goal = self.terminals[0] if self.terminals else -1
        self.start = int(start)
        self.T_max = int(T_max)

    def outcomes(self, s, a, t_open):
        row = self._P[s, a]
        return [(float(row[j]), int(j)) for j in np.flatnonzero(row)]

    def terminal_mask(self):
        m = np.zeros(self.n_states, bool)
        m[list(self.terminals)] = True
        return m

    def reward_tensor(self):
        R = self._R.copy()
        R[self.terminal_mask()] = 0.0
        return R

    def open_loop_key(self, t_open):
        return 0

    def distance(self, s1, s2):
        return abs(int(s1) - int(s2))

    def params(self):
        return {"n_states": self.n_states, "n_actions": self.n_actions}

    def step(self, action, requery=True):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        s = self.state
        a = int(action)
        row = self._P[s, a]
        s2 = int(self._rng.choice(self.n_states, p=row))
        r = float(self._R[s, a, s2])
        self._state = s2
        self._t += 1
        self.reached_goal = s2 in self.terminals
        self.done = self.reached_goal or self._t >= self.T_max
        return s2, r, self.done
