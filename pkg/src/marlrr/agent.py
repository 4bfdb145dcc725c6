"""Shared-parameter recurrent utility network and its action-selection policy.

All agents run one network; the input concatenates the local observation,
the one-hot previous action (zeros at the first step) and the one-hot agent
id.  Architecture: Linear -> ReLU -> GRU cell -> Linear, unrolled from a
zero hidden state.  An ablated variant replaces the GRU with a
width-matched feedforward ReLU layer for the plasticity comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ContractError, DimensionError
from .replay import EpisodeBatch


@dataclass(frozen=True)
class AgentNetworkSpec:
    obs_dim: int
    n_actions: int
    n_agents: int
    hidden_dim: int = 64
    recurrence: str = "gru"  # "gru" or "ff"

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 50_000


def epsilon_at(env_steps: int, schedule: EpsilonSchedule = EpsilonSchedule()) -> float:
    """Linear decay from start to end over decay_steps environment steps."""
    if env_steps >= schedule.decay_steps:
        return schedule.end
    frac = max(0.0, env_steps / schedule.decay_steps)
    return schedule.start + (schedule.end - schedule.start) * frac


def init_agent_params(spec: AgentNetworkSpec, rng: np.random.Generator) -> nc.ParamStore:
    h, d = spec.hidden_dim, spec.input_dim
    shapes: dict[str, tuple[int, ...]] = {"enc.w": (h, d), "enc.b": (h,)}
    if spec.recurrence == "gru":
        for gate in ("r", "z", "c"):
            shapes[f"gru.w_{gate}"] = (h, h)
            shapes[f"gru.u_{gate}"] = (h, h)
            shapes[f"gru.b_{gate}"] = (h,)
    elif spec.recurrence == "ff":
        shapes["fc2.w"] = (h, h)
        shapes["fc2.b"] = (h,)
    else:
        raise ContractError(f"unknown recurrence kind {spec.recurrence!r}")
    shapes["out.w"] = (spec.n_actions, h)
    shapes["out.b"] = (spec.n_actions,)
    return nc.init_params(shapes, rng)


def sequence_inputs(batch: EpisodeBatch, spec: AgentNetworkSpec) -> np.ndarray:
    """Stacked network inputs for sequence positions 0..T, time-major.

    Returns [(T+1) * B * n_agents, input_dim]; row t*B*n + b*n + i is agent
    i of episode b at position t.  Position t's previous action is the
    batch action at t-1 (zeros at t=0).
    """
    b, t_plus, n, obs_dim = batch.obs_seq.shape
    if obs_dim != spec.obs_dim or n != spec.n_agents:
        raise DimensionError(
            f"batch obs {batch.obs_seq.shape} does not match spec "
            f"(n_agents={spec.n_agents}, obs_dim={spec.obs_dim})"
        )
    rows = b * n
    out = np.zeros((t_plus * rows, spec.input_dim))
    eye_actions = np.eye(spec.n_actions)
    ids = np.tile(np.eye(spec.n_agents), (b, 1))
    for t in range(t_plus):
        block = slice(t * rows, (t + 1) * rows)
        out[block, : spec.obs_dim] = batch.obs_seq[:, t].reshape(rows, obs_dim)
        if t > 0:
            last = eye_actions[batch.actions[:, t - 1].reshape(rows)]
            out[block, spec.obs_dim : spec.obs_dim + spec.n_actions] = last
        out[block, spec.obs_dim + spec.n_actions :] = ids
    return out


def forward_numpy(
    params: nc.ParamStore,
    spec: AgentNetworkSpec,
    inputs: np.ndarray,
    n_steps: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plain-numpy unrolled forward: utilities, recurrent layer output, encoder.

    ``inputs`` is [n_steps * rows, input_dim] time-major; the hidden state
    starts at zero.  Used for target evaluation, rollouts over recorded
    batches, and activation probes.
    """
    total = inputs.shape[0]
    if total % n_steps != 0:
        raise DimensionError(f"{total} rows do not split into {n_steps} steps")
    rows = total // n_steps
    h = spec.hidden_dim
    enc = np.maximum(inputs @ params["enc.w"].T + params["enc.b"], 0.0)
    if spec.recurrence == "gru":
        # reset/update gates fused into one matmul and one sigmoid per step,
        # writing through scratch buffers to avoid per-step allocations
        w_rz = np.concatenate([params["gru.w_r"], params["gru.w_z"]])
        b_rz = np.concatenate([params["gru.b_r"], params["gru.b_z"]])
        u_rz_t = np.ascontiguousarray(
            np.concatenate([params["gru.u_r"], params["gru.u_z"]]).T
        )
        xrz = enc @ w_rz.T
        xrz += b_rz
        xc = enc @ params["gru.w_c"].T
        xc += params["gru.b_c"]
        uc_t = np.ascontiguousarray(params["gru.u_c"].T)
        h_all = np.empty((n_steps, rows, h))
        h_prev = np.zeros((rows, h))
        rz = np.empty((rows, 2 * h))
        c = np.empty((rows, h))
        for t in range(n_steps):
            block = slice(t * rows, (t + 1) * rows)
            np.matmul(h_prev, u_rz_t, out=rz)
            rz += xrz[block]
            nc._sigmoid_inplace(rz)
            rh = np.multiply(rz[:, :h], h_prev, out=c)
            pre_c = np.matmul(rh, uc_t, out=h_all[t])
            pre_c += xc[block]
            np.tanh(pre_c, out=c)
            h_new = np.subtract(c, h_prev, out=h_all[t])
            h_new *= rz[:, h:]
            h_new += h_prev
            h_prev = h_new
        hidden = h_all.reshape(total, h)
    else:
        hidden = np.maximum(enc @ params["fc2.w"].T + params["fc2.b"], 0.0)
    utilities = hidden @ params["out.w"].T + params["out.b"]
    return utilities, hidden, enc


def forward_tape(
    graph: nc.Graph,
    params: nc.ParamStore,
    spec: AgentNetworkSpec,
    inputs: np.ndarray,
    n_steps: int,
) -> nc.Node:
    """Tape-recorded forward pass; returns the utilities node [rows_total, A]."""
    total = inputs.shape[0]
    if total % n_steps != 0:
        raise DimensionError(f"{total} rows do not split into {n_steps} steps")
    rows = total // n_steps
    p = lambda name: graph.leaf(params, name)  # noqa: E731
    enc = nc.relu(nc.linear(nc.const(inputs), p("enc.w"), p("enc.b")))
    if spec.recurrence == "gru":
        hidden = nc.gru_sequence(
            nc.linear(enc, p("gru.w_r"), p("gru.b_r")),
            nc.linear(enc, p("gru.w_z"), p("gru.b_z")),
            nc.linear(enc, p("gru.w_c"), p("gru.b_c")),
            p("gru.u_r"),
            p("gru.u_z"),
            p("gru.u_c"),
            np.zeros((rows, spec.hidden_dim)),
            n_steps,
        )
    else:
        hidden = nc.relu(nc.linear(enc, p("fc2.w"), p("fc2.b")))
    return nc.linear(hidden, p("out.w"), p("out.b"))


def agent_forward(
    params: nc.ParamStore,
    spec: AgentNetworkSpec,
    batch: EpisodeBatch,
) -> tuple[np.ndarray, np.ndarray]:
    """Utilities [B, T, n, A] and recurrent-layer states [B, T, n, H]."""
    b, t_plus, n, _ = batch.obs_seq.shape
    steps = t_plus - 1
    inputs = sequence_inputs(batch, spec)[: steps * b * n]
    utilities, hidden, _ = forward_numpy(params, spec, inputs, steps)
    return (
        utilities.reshape(steps, b, n, spec.n_actions).transpose(1, 0, 2, 3),
        hidden.reshape(steps, b, n, spec.hidden_dim).transpose(1, 0, 2, 3),
    )


def step_forward(
    params: nc.ParamStore,
    spec: AgentNetworkSpec,
    obs: np.ndarray,
    last_actions: np.ndarray | None,
    hidden: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single environment step for all agents; returns (utilities, new hidden)."""
    n = spec.n_agents
    x = np.zeros((n, spec.input_dim))
    x[:, : spec.obs_dim] = obs
    if last_actions is not None:
        x[np.arange(n), spec.obs_dim + np.asarray(last_actions, dtype=np.int64)] = 1.0
    x[:, spec.obs_dim + spec.n_actions :] = np.eye(n)
    enc = np.maximum(nc.linear_forward(params["enc.w"], params["enc.b"], x), 0.0)
    if spec.recurrence == "gru":
        new_hidden = nc.gru_cell_forward(params.slice("gru."), enc, hidden)
    else:
        new_hidden = np.maximum(
            nc.linear_forward(params["fc2.w"], params["fc2.b"], enc), 0.0
        )
    utilities = nc.linear_forward(params["out.w"], params["out.b"], new_hidden)
    return utilities, new_hidden


def initial_hidden(spec: AgentNetworkSpec) -> np.ndarray:
    return np.zeros((spec.n_agents, spec.hidden_dim))


def select_actions(
    utilities: np.ndarray,
    masks: np.ndarray,
    epsilon: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-agent epsilon-greedy over available actions.

    Greedy ties break toward the lowest action index.  epsilon=0 consumes
    no randomness.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    utilities = np.asarray(utilities, dtype=np.float64)
    masks = np.asarray(masks)
    if utilities.shape != masks.shape:
        raise DimensionError(
            f"utilities {utilities.shape} and masks {masks.shape} differ"
        )
    if np.any(masks.sum(axis=1) < 1):
        raise ContractError("an agent has no available action")
    greedy = np.where(masks > 0, utilities, -np.inf).argmax(axis=1)
    if epsilon == 0.0:
        return greedy
    if rng is None:
        raise ContractError("epsilon > 0 requires a generator")
    explore = rng.random(len(greedy)) < epsilon
    actions = greedy.copy()
    for i in np.nonzero(explore)[0]:
        options = np.nonzero(masks[i] > 0)[0]
        actions[i] = options[rng.integers(len(options))]
    return actions
