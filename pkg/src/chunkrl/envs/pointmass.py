"""Continuous point mass with a noisy contact annulus around the goal."""

from __future__ import annotations

import numpy as np


class PointMassEnv:
    """State ``(x, y, vx, vy)`` in a square arena, acceleration actions in ``[-1, 1]^2``.

    Inside the annulus ``goal_radius < |p - goal| < contact_radius`` an
    observation-independent position drift is injected whose scale grows with
    the number of steps executed since the last re-query.
    """

    name = "pointmass"
    state_dim = 4
    action_dim = 2

    def __init__(
        self,
        dt: float = 0.1,
        arena: float = 1.0,
        v_max: float = 1.0,
        start: tuple[float, float] = (-0.8, 0.0),
        goal: tuple[float, float] = (0.8, 0.0),
        goal_radius: float = 0.1,
        contact_radius: float = 0.35,
        drift_sigma: float = 0.05,
        tau_acc: float = 2.0,
        T_max: int = 200,
    ):
        if dt <= 0 or goal_radius <= 0 or contact_radius <= goal_radius:
            raise ValueError("need dt > 0 and 0 < goal_radius < contact_radius")
        self.dt = float(dt)
        self.arena = float(arena)
        self.v_max = float(v_max)
        self.start = np.array(start, dtype=float)
        self.goal = np.array(goal, dtype=float)
        self.goal_radius = float(goal_radius)
        self.contact_radius = float(contact_radius)
        self.drift_sigma = float(drift_sigma)
        self.tau_acc = float(tau_acc)
        self.T_max = int(T_max)
        self._rng = np.random.default_rng(0)
        self._state: np.ndarray | None = None
        self._t = 0
        self._t_open = 0
        self.done = True
        self.reached_goal = False

    @property
    def discrete(self) -> bool:
        return False

    @property
    def state(self) -> np.ndarray:
        if self._state is None:
            raise RuntimeError("call reset() first")
        return self._state.copy()

    def reset(self, seed=None, state=None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        if state is None:
            self._state = np.concatenate([self.start, np.zeros(2)])
        else:
            self._state = np.asarray(state, dtype=float).copy()
        self._t = 0
        self._t_open = 0
        self.done = False
        self.reached_goal = False
        return self.state

    def goal_distance(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s)
        return np.linalg.norm(s[..., :2] - self.goal, axis=-1)

    def in_contact(self, s) -> bool:
        d = float(self.goal_distance(s))
        return self.goal_radius < d < self.contact_radius

    def region(self, s) -> str:
        return "contact" if self.in_contact(s) else "corridor"

    def drift_scale(self, t_open: int) -> float:
        return self.drift_sigma * (1.0 + t_open / self.tau_acc)

    def step(self, action, requery: bool = True):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        if not np.all(np.isfinite(a)):
            raise ValueError("action must be finite")
        if requery:
            self._t_open = 0
        s = self._state
        pos, vel = s[:2], s[2:]
        vel = np.clip(vel + self.dt * a, -self.v_max, self.v_max)
        pos = pos + self.dt * vel
        if self.in_contact(s):
            pos = pos + self._rng.normal(0.0, self.drift_scale(self._t_open), size=2) * self.dt
        pos = np.clip(pos, -self.arena, self.arena)
        self._state = np.concatenate([pos, vel])
        self._t += 1
        self._t_open += 1
        self.reached_goal = bool(self.goal_distance(self._state) <= self.goal_radius)
        self.done = self.reached_goal or self._t >= self.T_max
        return self.state, (0.0 if self.reached_goal else -1.0), self.done

    def expert_action(self, s, kp: float = 2.0, kd: float = 2.0) -> np.ndarray:
        """PD controller toward the goal."""
        s = np.asarray(s, dtype=float)
        return np.clip(kp * (self.goal - s[:2]) - kd * s[2:], -1.0, 1.0)

    def distance(self, s1, s2) -> float:
        return float(np.linalg.norm(np.asarray(s1) - np.asarray(s2)))

    def params(self) -> dict:
        return {
            "dt": self.dt,
            "arena": self.arena,
            "v_max": self.v_max,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "goal_radius": self.goal_radius,
            "contact_radius": self.contact_radius,
            "drift_sigma": self.drift_sigma,
            "tau_acc": self.tau_acc,
            "T_max": self.T_max,
        }
