"""Built-in cooperative Dec-POMDP environments.

A partially observable capture gridworld (the main task) and a one-step
cooperative matrix game (for convergence smoke tests).  Both expose the
same surface: reset(rng) / step(joint_action) / observe / global_state /
available_actions, plus a DecPomdpSpec describing their dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, StateError

# Gridworld action order; moves into walls become stay.
ACTIONS = ("up", "down", "left", "right", "stay")
_DELTAS = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])

CAPTURE_REWARD = 10.0
STEP_COST = 0.05


@dataclass(frozen=True)
class DecPomdpSpec:
    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("n_agents", "n_actions", "obs_dim", "state_dim", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    obs: np.ndarray            # [n_agents, obs_dim]
    actions: np.ndarray        # [n_agents] int
    reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    terminated: bool
    available: np.ndarray      # [n_agents, n_actions] at s
    next_available: np.ndarray


@dataclass
class Trajectory:
    """One episode, stored without duplicating the obs/state chains.

    states/obs/available hold length+1 entries (position t is the input of
    transition t; position length is the final next state/obs).
    """

    states: np.ndarray          # [L+1, state_dim]
    obs: np.ndarray             # [L+1, n_agents, obs_dim]
    available: np.ndarray      # [L+1, n_agents, n_actions]
    actions: np.ndarray        # [L, n_agents]
    rewards: np.ndarray        # [L]
    terminated: np.ndarray     # [L] bool, True only on the last entry
    won: bool

    @property
    def length(self) -> int:
        return len(self.rewards)

    def transitions(self):
        for t in range(self.length):
            yield Transition(
                state=self.states[t],
                obs=self.obs[t],
                actions=self.actions[t],
                reward=float(self.rewards[t]),
                next_state=self.states[t + 1],
                next_obs=self.obs[t + 1],
                terminated=bool(self.terminated[t]),
                available=self.available[t],
                next_available=self.available[t + 1],
            )

    def episode_return(self) -> float:
        return float(self.rewards.sum())


class CaptureGridworld:
    """Agents cooperate to capture randomly moving prey on a bounded grid.

    Agents move simultaneously (sharing a cell is allowed); a prey is
    captured when at least two agents stand orthogonally adjacent to it
    right after the agent move; surviving prey then move uniformly at
    random among their legal moves.  Reward is +10 per capture and -0.05
    per step; the episode ends won when all prey are captured, or lost at
    the horizon.
    """

    def __init__(
        self,
        size: int = 7,
        n_agents: int = 3,
        n_prey: int = 2,
        obs_radius: int = 2,
        horizon: int = 50,
        gamma: float = 0.99,
    ):
        if size < 2 or n_agents < 1 or n_prey < 1 or obs_radius < 1:
            raise ConfigError("gridworld dimensions must be positive (size >= 2)")
        if n_agents + n_prey > size * size:
            raise ConfigError("more entities than grid cells")
        self.size = size
        self.n_agents = n_agents
        self.n_prey = n_prey
        self.obs_radius = obs_radius
        window = 2 * obs_radius + 1
        self.spec = DecPomdpSpec(
            n_agents=n_agents,
            n_actions=len(ACTIONS),
            obs_dim=3 * window * window + 2,
            state_dim=2 * n_agents + 3 * n_prey,
            horizon=horizon,
            gamma=gamma,
        )
        self.agent_pos = np.zeros((n_agents, 2), dtype=np.int64)
        self.prey_pos = np.zeros((n_prey, 2), dtype=np.int64)
        self.prey_alive = np.zeros(n_prey, dtype=bool)
        self.steps = 0
        self._done = True
        self._rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator):
        """Place agents and prey at pairwise distinct uniform cells."""
        self._rng = rng
        cells = rng.choice(self.size * self.size, size=self.n_agents + self.n_prey, replace=False)
        coords = np.stack([cells // self.size, cells % self.size], axis=1)
        self.agent_pos = coords[: self.n_agents].copy()
        self.prey_pos = coords[self.n_agents:].copy()
        self.prey_alive = np.ones(self.n_prey, dtype=bool)
        self.steps = 0
        self._done = False
        return self.global_state(), self.observations(), self.available_actions()

    def available_actions(self) -> np.ndarray:
        # moves into walls are legal no-ops, so everything is available
        return np.ones((self.n_agents, len(ACTIONS)), dtype=np.float64)

    def step(self, joint_action):
        if self._done:
            raise StateError("step called on a terminated episode")
        joint_action = np.asarray(joint_action, dtype=np.int64)
        if joint_action.shape != (self.n_agents,) or np.any(joint_action < 0) or np.any(
            joint_action >= len(ACTIONS)
        ):
            raise ContractError(f"bad joint action {joint_action!r}")

        moved = self.agent_pos + _DELTAS[joint_action]
        np.clip(moved, 0, self.size - 1, out=moved)
        self.agent_pos = moved

        reward = -STEP_COST
        for p in range(self.n_prey):
            if not self.prey_alive[p]:
                continue
            dist = np.abs(self.agent_pos - self.prey_pos[p]).sum(axis=1)
            if int((dist == 1).sum()) >= 2:
                self.prey_alive[p] = False  # position stays frozen at the capture cell
                reward += CAPTURE_REWARD

        for p in range(self.n_prey):
            if not self.prey_alive[p]:
                continue
            options = self.prey_pos[p] + _DELTAS
            legal = np.all((options >= 0) & (options < self.size), axis=1)
            pick = self._rng.integers(int(legal.sum()))
            self.prey_pos[p] = options[legal][pick]

        self.steps += 1
        won = not self.prey_alive.any()
        self._done = won or self.steps >= self.spec.horizon
        return (
            self.global_state(),
            self.observations(),
            float(reward),
            self._done,
            won,
        )

    def observe(self, agent_index: int) -> np.ndarray:
        """Egocentric window with ally/prey/wall channels plus own coordinates."""
        if not 0 <= agent_index < self.n_agents:
            raise ContractError(f"bad agent index {agent_index}")
        r = self.obs_radius
        window = 2 * r + 1
        channels = np.zeros((3, window, window))
        row0, col0 = self.agent_pos[agent_index]
        for other in range(self.n_agents):
            if other == agent_index:
                continue
            dr, dc = self.agent_pos[other] - (row0, col0)
            if abs(dr) <= r and abs(dc) <= r:
                channels[0, dr + r, dc + r] = 1.0
        for p in range(self.n_prey):
            if not self.prey_alive[p]:
                continue
            dr, dc = self.prey_pos[p] - (row0, col0)
            if abs(dr) <= r and abs(dc) <= r:
                channels[1, dr + r, dc + r] = 1.0
        rows = row0 + np.arange(-r, r + 1)
        cols = col0 + np.arange(-r, r + 1)
        outside_row = (rows < 0) | (rows >= self.size)
        outside_col = (cols < 0) | (cols >= self.size)
        channels[2, outside_row, :] = 1.0
        channels[2, :, outside_col] = 1.0
        norm = self.size - 1
        coords = np.array([row0 / norm, col0 / norm])
        return np.concatenate([channels.reshape(-1), coords])

    def observations(self) -> np.ndarray:
        return np.stack([self.observe(i) for i in range(self.n_agents)])

    def global_state(self) -> np.ndarray:
        """Normalized agent and prey coordinates plus per-prey alive flags."""
        norm = self.size - 1
        parts = [self.agent_pos.reshape(-1) / norm]
        parts.append(self.prey_pos.reshape(-1) / norm)
        parts.append(self.prey_alive.astype(np.float64))
        return np.concatenate(parts)


class MatrixGame:
    """One-step cooperative game: both agents act once, reward = payoff[a0][a1]."""

    def __init__(self, payoff=None, gamma: float = 0.99):
        if payoff is None:
            payoff = [[1.0, 0.0], [0.0, 1.0]]
        self.payoff = np.asarray(payoff, dtype=np.float64)
        if self.payoff.ndim != 2:
            raise ConfigError("payoff must be a 2-D matrix")
        self.n_agents = 2
        n_actions = max(self.payoff.shape)
        self.spec = DecPomdpSpec(
            n_agents=2,
            n_actions=n_actions,
            obs_dim=2,
            state_dim=1,
            horizon=1,
            gamma=gamma,
        )
        self._done = True

    def reset(self, rng: np.random.Generator):
        self._done = False
        return self.global_state(), self.observations(), self.available_actions()

    def available_actions(self) -> np.ndarray:
        avail = np.zeros((2, self.spec.n_actions))
        avail[0, : self.payoff.shape[0]] = 1.0
        avail[1, : self.payoff.shape[1]] = 1.0
        return avail

    def step(self, joint_action):
        if self._done:
            raise StateError("step called on a terminated episode")
        a0, a1 = (int(a) for a in joint_action)
        avail = self.available_actions()
        if not (avail[0, a0] and avail[1, a1]):
            raise ContractError(f"unavailable action pair ({a0}, {a1})")
        reward = float(self.payoff[a0, a1])
        self._done = True
        return self.global_state(), self.observations(), reward, True, reward > 0.0

    def observe(self, agent_index: int) -> np.ndarray:
        one_hot = np.zeros(2)
        one_hot[agent_index] = 1.0
        return one_hot

    def observations(self) -> np.ndarray:
        return np.eye(2)

    def global_state(self) -> np.ndarray:
        return np.zeros(1)


def load_payoff(path) -> np.ndarray:
    """Payoff file: first line two action counts, then the payoff rows."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = cols = None
    payoff: list[list[float]] = []
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if rows is None:
            parts = text.split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected two action counts")
            try:
                rows, cols = int(parts[0]), int(parts[1])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: action counts must be integers")
            if rows < 1 or cols < 1:
                raise ConfigError(f"{path}:{lineno}: action counts must be >= 1")
            continue
        try:
            row = [float(v) for v in text.split()]
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: malformed payoff row")
        if len(row) != cols:
            raise ConfigError(f"{path}:{lineno}: expected {cols} entries, got {len(row)}")
        payoff.append(row)
    if rows is None:
        raise ConfigError(f"{path}: empty payoff file")
    if len(payoff) != rows:
        raise ConfigError(f"{path}: expected {rows} payoff rows, got {len(payoff)}")
    matrix = np.asarray(payoff)
    if not np.all(np.isfinite(matrix)):
        raise ConfigError(f"{path}: payoff entries must be finite")
    return matrix
