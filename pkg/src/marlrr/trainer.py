"""Episodic training with a configurable replay ratio.

One outer iteration collects a single episode with epsilon-greedy actions
from the online network, pushes it into the replay buffer, then performs
replay_ratio gradient updates, each on a freshly resampled batch, followed
by an EMA update of the target stores.  Evaluation and a dormant-neuron
probe run on a fixed episode cadence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import agent as ag
from . import numcore as nc
from . import plasticity
from .envs import CaptureGridworld, MatrixGame, Trajectory, load_payoff
from .errors import ConfigError, ContractError
from .mixers import NEG_MASK, make_mixer, make_mixer_input
from .replay import EpisodeBatch, ReplayBuffer


@dataclass(frozen=True)
class TrainConfig:
    env: str = "gridworld"
    mixer: str = "vdn"
    seed: int = 0
    replay_ratio: int = 1
    alpha_theta: float = 0.0005
    alpha_phi: float = 0.0005
    eta_theta: float = 0.005
    eta_phi: float = 0.005
    gamma: float = 0.99
    batch_size: int = 32
    buffer_capacity: int = 5000
    total_episodes: int = 2000
    eval_every: int = 200
    eval_episodes: int = 32
    reset_every: int = 0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 50_000
    hidden_dim: int = 64
    recurrence: str = "gru"
    qmix_embed: int = 32
    grid_size: int = 7
    n_agents: int = 3
    n_prey: int = 2
    obs_radius: int = 2
    horizon: int = 50
    payoff_file: str = ""
    update_budget: int = 0  # 0 = unlimited
    probe_episodes: int = 32
    dump_trajectories: bool = False

    def validate(self) -> None:
        def require(ok: bool, key: str, interval: str) -> None:
            if not ok:
                raise ConfigError(
                    f"{key} = {getattr(self, key)!r} outside valid {interval}"
                )

        require(self.env in ("gridworld", "matrix"), "env", "{gridworld, matrix}")
        require(self.mixer in ("vdn", "qmix", "qplex"), "mixer", "{vdn, qmix, qplex}")
        require(self.recurrence in ("gru", "ff"), "recurrence", "{gru, ff}")
        require(self.replay_ratio >= 1, "replay_ratio", "[1, inf)")
        require(self.alpha_theta > 0, "alpha_theta", "(0, inf)")
        require(self.alpha_phi > 0, "alpha_phi", "(0, inf)")
        require(0 < self.eta_theta < 1, "eta_theta", "(0, 1)")
        require(0 < self.eta_phi < 1, "eta_phi", "(0, 1)")
        require(0 <= self.gamma < 1, "gamma", "[0, 1)")
        require(self.batch_size >= 1, "batch_size", "[1, inf)")
        require(self.buffer_capacity >= 1, "buffer_capacity", "[1, inf)")
        require(self.total_episodes >= 1, "total_episodes", "[1, inf)")
        require(self.eval_every >= 1, "eval_every", "[1, inf)")
        require(self.eval_episodes >= 1, "eval_episodes", "[1, inf)")
        require(self.reset_every >= 0, "reset_every", "[0, inf)")
        require(0 <= self.epsilon_end <= self.epsilon_start <= 1, "epsilon_start", "[epsilon_end, 1]")
        require(self.epsilon_decay_steps >= 1, "epsilon_decay_steps", "[1, inf)")
        require(self.hidden_dim >= 1, "hidden_dim", "[1, inf)")
        require(self.qmix_embed >= 1, "qmix_embed", "[1, inf)")
        require(self.grid_size >= 2, "grid_size", "[2, inf)")
        require(self.n_agents >= 1, "n_agents", "[1, inf)")
        require(self.n_prey >= 1, "n_prey", "[1, inf)")
        require(self.obs_radius >= 1, "obs_radius", "[1, inf)")
        require(self.horizon >= 1, "horizon", "[1, inf)")
        require(self.update_budget >= 0, "update_budget", "[0, inf)")
        require(self.probe_episodes >= 1, "probe_episodes", "[1, inf)")

    @property
    def epsilon_schedule(self) -> ag.EpsilonSchedule:
        return ag.EpsilonSchedule(
            self.epsilon_start, self.epsilon_end, self.epsilon_decay_steps
        )


@dataclass
class UpdateRecord:
    update: int
    episode: int
    env_steps: int
    loss: float
    grad_norm: float


@dataclass
class EvalRecord:
    episode: int
    env_steps: int
    updates: int
    mean_return: float
    discounted_return: float
    win_rate: float
    dnr_overall: float
    dnr_layers: list[tuple[str, int, int, float]]  # (layer, width, dormant, ratio)


@dataclass
class RunMetrics:
    updates: list[UpdateRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    total_episodes: int = 0
    total_updates: int = 0
    total_env_steps: int = 0

    @property
    def final_win_rate(self) -> float:
        return self.evals[-1].win_rate if self.evals else 0.0

    @property
    def final_return(self) -> float:
        return self.evals[-1].mean_return if self.evals else 0.0


@dataclass
class Networks:
    spec: ag.AgentNetworkSpec
    mixer: object
    theta: nc.ParamStore
    phi: nc.ParamStore
    theta_target: nc.ParamStore
    phi_target: nc.ParamStore


def make_env(config: TrainConfig):
    if config.env == "gridworld":
        return CaptureGridworld(
            size=config.grid_size,
            n_agents=config.n_agents,
            n_prey=config.n_prey,
            obs_radius=config.obs_radius,
            horizon=config.horizon,
            gamma=config.gamma,
        )
    payoff = load_payoff(config.payoff_file) if config.payoff_file else None
    return MatrixGame(payoff=payoff, gamma=config.gamma)


def init_networks(config: TrainConfig, env_spec, rng: np.random.Generator) -> Networks:
    spec = ag.AgentNetworkSpec(
        obs_dim=env_spec.obs_dim,
        n_actions=env_spec.n_actions,
        n_agents=env_spec.n_agents,
        hidden_dim=config.hidden_dim,
        recurrence=config.recurrence,
    )
    mixer = make_mixer(
        config.mixer, env_spec.state_dim, env_spec.n_agents, env_spec.n_actions,
        embed_dim=config.qmix_embed,
    )
    theta = ag.init_agent_params(spec, rng)
    phi = mixer.init_params(rng)
    return Networks(
        spec=spec,
        mixer=mixer,
        theta=theta,
        phi=phi,
        theta_target=theta.copy(),
        phi_target=phi.copy(),
    )


def collect_episode(
    env,
    nets: Networks,
    schedule: ag.EpsilonSchedule,
    env_steps_so_far: int,
    env_rng: np.random.Generator,
    explore_rng: np.random.Generator,
) -> Trajectory:
    state, obs, avail = env.reset(env_rng)
    states, obs_l, avail_l = [state], [obs], [avail]
    actions_l, rewards, terms = [], [], []
    hidden = ag.initial_hidden(nets.spec)
    last_actions = None
    done = won = False
    step = 0
    while not done:
        utilities, hidden = ag.step_forward(nets.theta, nets.spec, obs, last_actions, hidden)
        eps = ag.epsilon_at(env_steps_so_far + step, schedule)
        actions = ag.select_actions(utilities, avail, eps, explore_rng)
        state, obs, reward, done, won = env.step(actions)
        avail = env.available_actions()
        states.append(state)
        obs_l.append(obs)
        avail_l.append(avail)
        actions_l.append(actions)
        rewards.append(reward)
        terms.append(done)
        last_actions = actions
        step += 1
    return Trajectory(
        states=np.stack(states),
        obs=np.stack(obs_l),
        available=np.stack(avail_l),
        actions=np.stack(actions_l),
        rewards=np.array(rewards, dtype=np.float64),
        terminated=np.array(terms, dtype=bool),
        won=won,
    )


def _time_major(x: np.ndarray) -> np.ndarray:
    """[B, T, ...] -> [T*B, ...] so that row t*B + b is (episode b, step t)."""
    return np.ascontiguousarray(np.moveaxis(x, 1, 0)).reshape(-1, *x.shape[2:])


def compute_td_loss(
    batch: EpisodeBatch,
    nets: Networks,
    gamma: float,
    want_grads: bool = True,
):
    """Masked mean squared TD error over valid transitions.

    delta = g_phi(s, u_theta at taken actions)
            - (r + gamma * (1 - terminated) * g_phi'(s', u_theta' at its greedy actions))

    The bootstrap side is evaluated without gradient; online gradients flow
    through the mixer into the agent BPTT.  Returns (loss, grad_theta,
    grad_phi); the gradients are None when want_grads is false.
    """
    b, t_plus, n, _ = batch.obs_seq.shape
    steps = t_plus - 1
    rows = b * n
    valid_tm = _time_major(batch.valid[..., None])[:, 0]
    valid_count = valid_tm.sum()
    if valid_count == 0:
        raise ContractError("batch has an empty valid mask")

    inputs_all = ag.sequence_inputs(batch, nets.spec)

    # bootstrap side, no gradient: greedy actions of the target network itself
    q_target, _, _ = ag.forward_numpy(nets.theta_target, nets.spec, inputs_all, steps + 1)
    next_q = q_target[rows:]
    next_avail = _time_major(batch.next_avail).reshape(steps * rows, -1)
    masked_next = np.where(next_avail > 0, next_q, -NEG_MASK)
    greedy_next = masked_next.argmax(axis=1).reshape(steps * b, n)
    next_states = _time_major(batch.next_states)
    target_inp = make_mixer_input(next_q, next_states, greedy_next, next_avail)
    q_tot_next = nets.mixer.mix(nets.phi_target, target_inp)

    rewards = _time_major(batch.rewards[..., None])[:, 0]
    terminated = _time_major(batch.terminated[..., None])[:, 0]
    targets = rewards + gamma * (1.0 - terminated) * q_tot_next

    states = _time_major(batch.states)
    actions = _time_major(batch.actions)
    avail = _time_major(batch.avail).reshape(steps * rows, -1)
    online_inputs = inputs_all[: steps * rows]

    if not want_grads:
        q_online, _, _ = ag.forward_numpy(nets.theta, nets.spec, online_inputs, steps)
        inp = make_mixer_input(q_online, states, actions, avail)
        q_tot = nets.mixer.mix(nets.phi, inp)
        delta = q_tot - targets
        loss = float((delta * delta * valid_tm).sum() / valid_count)
        return loss, None, None

    graph = nc.Graph()
    q_node = ag.forward_tape(graph, nets.theta, nets.spec, online_inputs, steps)
    inp = make_mixer_input(q_node, states, actions, avail)
    q_tot = nets.mixer.mix_tape(graph, nets.phi, inp)
    delta = nc.sub(q_tot, nc.const(targets))
    loss_node = nc.scale(
        nc.reduce_sum(nc.mul(nc.mul(delta, delta), nc.const(valid_tm))),
        1.0 / valid_count,
    )
    graph.backward(loss_node)
    return float(loss_node.value), graph.grads(nets.theta), graph.grads(nets.phi)


def train_step(
    buffer: ReplayBuffer,
    nets: Networks,
    config: TrainConfig,
    rng: np.random.Generator,
    updates_done: int = 0,
) -> list[tuple[float, float]]:
    """replay_ratio updates, each on a freshly sampled batch; no-op until ready.

    Returns (loss, grad_norm) per update actually performed; the
    update_budget cap (when set) stops further updates early.
    """
    if len(buffer) < config.batch_size:
        return []
    records = []
    for _ in range(config.replay_ratio):
        if config.update_budget and updates_done + len(records) >= config.update_budget:
            break
        batch = buffer.sample(config.batch_size, rng)
        loss, grad_theta, grad_phi = compute_td_loss(batch, nets, config.gamma)
        grad_norm = math.sqrt(grad_theta.norm() ** 2 + grad_phi.norm() ** 2)
        nc.sgd_step(nets.theta, grad_theta, config.alpha_theta)
        nc.sgd_step(nets.phi, grad_phi, config.alpha_phi)
        nc.ema_update(nets.theta_target, nets.theta, config.eta_theta)
        nc.ema_update(nets.phi_target, nets.phi, config.eta_phi)
        records.append((loss, grad_norm))
    return records


def evaluate(
    nets: Networks,
    config: TrainConfig,
    rng: np.random.Generator,
    episodes: int | None = None,
) -> tuple[float, float, float]:
    """Greedy episodes on fresh env instances: (discounted G, mean return, win rate)."""
    episodes = episodes or config.eval_episodes
    discounted, undiscounted, wins = 0.0, 0.0, 0
    for _ in range(episodes):
        env = make_env(config)
        state, obs, avail = env.reset(rng)
        hidden = ag.initial_hidden(nets.spec)
        last_actions = None
        done = False
        t = 0
        while not done:
            utilities, hidden = ag.step_forward(nets.theta, nets.spec, obs, last_actions, hidden)
            actions = ag.select_actions(utilities, avail, 0.0)
            state, obs, reward, done, won = env.step(actions)
            avail = env.available_actions()
            discounted += (config.gamma ** t) * reward
            undiscounted += reward
            last_actions = actions
            t += 1
        wins += int(won)
    return discounted / episodes, undiscounted / episodes, wins / episodes


def run(config: TrainConfig, writer=None) -> RunMetrics:
    """Full training loop; deterministic function of the config (incl. seed)."""
    config.validate()
    streams = np.random.SeedSequence(config.seed).spawn(7)
    rng_init, rng_env, rng_explore, rng_sample, rng_eval, rng_probe, rng_reset = (
        np.random.default_rng(s) for s in streams
    )
    env = make_env(config)
    nets = init_networks(config, env.spec, rng_init)
    buffer = ReplayBuffer(config.buffer_capacity)
    schedule = config.epsilon_schedule
    metrics = RunMetrics()
    kept_trajectories: list[Trajectory] | None = [] if config.dump_trajectories else None

    env_steps = 0
    updates = 0
    for episode in range(1, config.total_episodes + 1):
        traj = collect_episode(env, nets, schedule, env_steps, rng_env, rng_explore)
        env_steps += traj.length
        buffer.push(traj)
        if kept_trajectories is not None:
            kept_trajectories.append(traj)

        for loss, grad_norm in train_step(buffer, nets, config, rng_sample, updates):
            updates += 1
            record = UpdateRecord(
                update=updates,
                episode=episode,
                env_steps=env_steps,
                loss=loss,
                grad_norm=grad_norm,
            )
            metrics.updates.append(record)
            if writer is not None:
                writer.on_update(record)

        if episode % config.eval_every == 0 or episode == config.total_episodes:
            discounted, mean_return, win_rate = evaluate(nets, config, rng_eval)
            report = plasticity.probe(
                nets.theta,
                nets.spec,
                nets.mixer,
                nets.phi,
                buffer.episodes(),
                probe_size=config.probe_episodes,
                rng=rng_probe,
            )
            record = EvalRecord(
                episode=episode,
                env_steps=env_steps,
                updates=updates,
                mean_return=mean_return,
                discounted_return=discounted,
                win_rate=win_rate,
                dnr_overall=report.overall,
                dnr_layers=[
                    (layer.name, layer.width, layer.dormant, layer.ratio)
                    for layer in report.layers
                ],
            )
            metrics.evals.append(record)
            if writer is not None:
                writer.on_eval(record)

        if config.reset_every and episode % config.reset_every == 0:
            nc.reset_selected(nets.theta, "out.", rng_reset)
            for name in nets.theta.names():
                if name.startswith("out."):
                    nets.theta_target[name] = nets.theta[name].copy()

    metrics.total_episodes = config.total_episodes
    metrics.total_updates = updates
    metrics.total_env_steps = env_steps
    if writer is not None and kept_trajectories is not None:
        writer.on_trajectories(kept_trajectories, config.seed)
    return metrics


@dataclass
class BudgetCell:
    update_budget: int
    data_budget: int
    replay_ratio: int
    capped: bool
    win_rates: list[float]

    @property
    def mean_win_rate(self) -> float:
        return float(np.mean(self.win_rates))


def budget_grid(
    template: TrainConfig,
    update_budgets: list[int],
    data_budgets: list[int],
    seeds: list[int] | None = None,
) -> list[BudgetCell]:
    """Final win rates over an (update budget x data budget) grid.

    Each cell derives N = max(1, round(U / E)) and trains to the episode
    budget E with updates capped at U; U < E flags the cell as capped.
    """
    if any(u < 1 for u in update_budgets) or any(e < 1 for e in data_budgets):
        raise ConfigError("budgets must be positive")
    seeds = seeds if seeds is not None else [template.seed]
    cells = []
    for u in update_budgets:
        for e in data_budgets:
            ratio = max(1, round(u / e))
            win_rates = []
            for seed in seeds:
                cfg = replace(
                    template,
                    replay_ratio=ratio,
                    total_episodes=e,
                    update_budget=u,
                    seed=seed,
                )
                win_rates.append(run(cfg).final_win_rate)
            cells.append(
                BudgetCell(
                    update_budget=u,
                    data_budget=e,
                    replay_ratio=ratio,
                    capped=u < e,
                    win_rates=win_rates,
                )
            )
    return cells


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
