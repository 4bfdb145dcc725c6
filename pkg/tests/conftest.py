import numpy as np
import pytest

from marlrr.envs import CaptureGridworld, MatrixGame, Trajectory


def uniform_rollout(env, env_seed=0, action_seed=1) -> Trajectory:
    """Play one episode with uniform-random available actions."""
    arng = np.random.default_rng(action_seed)
    state, obs, avail = env.reset(np.random.default_rng(env_seed))
    states, obs_l, avail_l = [state], [obs], [avail]
    actions, rewards, terms = [], [], []
    done = won = False
    while not done:
        acts = np.array([
            np.nonzero(avail[i] > 0)[0][arng.integers(int(avail[i].sum()))]
            for i in range(env.spec.n_agents)
        ])
        state, obs, reward, done, won = env.step(acts)
        avail = env.available_actions()
        states.append(state)
        obs_l.append(obs)
        avail_l.append(avail)
        actions.append(acts)
        rewards.append(reward)
        terms.append(done)
    return Trajectory(
        states=np.stack(states),
        obs=np.stack(obs_l),
        available=np.stack(avail_l),
        actions=np.stack(actions),
        rewards=np.array(rewards, dtype=np.float64),
        terminated=np.array(terms, dtype=bool),
        won=won,
    )


def synthetic_trajectory(length, n_agents=2, n_actions=3, obs_dim=4, state_dim=2,
                         seed=0, won=False) -> Trajectory:
    """Arbitrary well-formed episode of a given length."""
    rng = np.random.default_rng(seed)
    terminated = np.zeros(length, dtype=bool)
    terminated[-1] = True
    return Trajectory(
        states=rng.normal(size=(length + 1, state_dim)),
        obs=rng.normal(size=(length + 1, n_agents, obs_dim)),
        available=np.ones((length + 1, n_agents, n_actions)),
        actions=rng.integers(0, n_actions, size=(length, n_agents)),
        rewards=rng.normal(size=length),
        terminated=terminated,
        won=won,
    )


@pytest.fixture
def small_grid():
    return CaptureGridworld(size=5, n_agents=2, n_prey=1, obs_radius=1, horizon=8)


@pytest.fixture
def matrix_env():
    return MatrixGame()
