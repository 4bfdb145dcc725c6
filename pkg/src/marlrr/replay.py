"""Episode replay buffer with FIFO eviction and uniform padded-batch sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .envs import Trajectory
from .errors import ContractError, NotReadyError


@dataclass
class EpisodeBatch:
    """Padded, masked batch of trajectories.

    obs_seq/avail_seq/states_seq carry max_length+1 positions per episode
    (position t is the input of transition t); everything else is per
    transition.  valid is a per-episode prefix mask; padded cells are zero.
    """

    states_seq: np.ndarray   # [B, T+1, state_dim]
    obs_seq: np.ndarray      # [B, T+1, n_agents, obs_dim]
    avail_seq: np.ndarray    # [B, T+1, n_agents, n_actions]
    actions: np.ndarray      # [B, T, n_agents] int
    rewards: np.ndarray      # [B, T]
    terminated: np.ndarray   # [B, T]
    valid: np.ndarray        # [B, T]
    lengths: np.ndarray      # [B] int

    @property
    def size(self) -> int:
        return self.states_seq.shape[0]

    @property
    def max_length(self) -> int:
        return self.rewards.shape[1]

    @property
    def states(self) -> np.ndarray:
        return self.states_seq[:, :-1]

    @property
    def next_states(self) -> np.ndarray:
        return self.states_seq[:, 1:]

    @property
    def obs(self) -> np.ndarray:
        return self.obs_seq[:, :-1]

    @property
    def next_obs(self) -> np.ndarray:
        return self.obs_seq[:, 1:]

    @property
    def avail(self) -> np.ndarray:
        return self.avail_seq[:, :-1]

    @property
    def next_avail(self) -> np.ndarray:
        return self.avail_seq[:, 1:]


def collate(trajectories: list[Trajectory]) -> EpisodeBatch:
    """Pad a list of episodes to the longest one and build the prefix masks."""
    if not trajectories:
        raise ContractError("cannot collate an empty batch")
    batch = len(trajectories)
    max_len = max(t.length for t in trajectories)
    first = trajectories[0]
    n_agents = first.obs.shape[1]
    obs_dim = first.obs.shape[2]
    state_dim = first.states.shape[1]
    n_actions = first.available.shape[2]

    out = EpisodeBatch(
        states_seq=np.zeros((batch, max_len + 1, state_dim)),
        obs_seq=np.zeros((batch, max_len + 1, n_agents, obs_dim)),
        avail_seq=np.zeros((batch, max_len + 1, n_agents, n_actions)),
        actions=np.zeros((batch, max_len, n_agents), dtype=np.int64),
        rewards=np.zeros((batch, max_len)),
        terminated=np.zeros((batch, max_len)),
        valid=np.zeros((batch, max_len)),
        lengths=np.array([t.length for t in trajectories], dtype=np.int64),
    )
    for i, traj in enumerate(trajectories):
        ln = traj.length
        out.states_seq[i, : ln + 1] = traj.states
        out.obs_seq[i, : ln + 1] = traj.obs
        out.avail_seq[i, : ln + 1] = traj.available
        out.actions[i, :ln] = traj.actions
        out.rewards[i, :ln] = traj.rewards
        out.terminated[i, :ln] = traj.terminated.astype(np.float64)
        out.valid[i, :ln] = 1.0
    return out


class ReplayBuffer:
    """Ring of whole episodes; strictly FIFO eviction, uniform sampling."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ContractError("capacity must be >= 1")
        self.capacity = capacity
        self._storage: list[Trajectory] = []
        self._next = 0
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, trajectory: Trajectory) -> None:
        if trajectory.length == 0:
            raise ContractError("cannot push an empty trajectory")
        if len(self._storage) < self.capacity:
            self._storage.append(trajectory)
        else:
            self._storage[self._next] = trajectory
            self._next = (self._next + 1) % self.capacity
        self.inserted += 1

    def episodes(self) -> list[Trajectory]:
        """Snapshot view in eviction order (oldest first)."""
        return self._storage[self._next:] + self._storage[: self._next]

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        """Uniform without replacement within the batch; padded to max length."""
        if len(self._storage) < batch_size:
            raise NotReadyError(
                f"buffer holds {len(self._storage)} episodes, need {batch_size}"
            )
        idx = rng.choice(len(self._storage), size=batch_size, replace=False)
        return collate([self._storage[i] for i in idx])


def dump_trajectories(trajectories, path, seed: int) -> None:
    """Line-delimited episode log for offline replay verification."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for episode, traj in enumerate(trajectories):
            record = {
                "seed": seed,
                "episode": episode,
                "length": traj.length,
                "won": bool(traj.won),
                "actions": traj.actions.tolist(),
                "rewards": [float(f"{r:.9g}") for r in traj.rewards],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_trajectory_dump(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
