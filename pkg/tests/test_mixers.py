import itertools

import numpy as np
import pytest

from marlrr import mixers as mx
from marlrr import numcore as nc


def random_input(rng, rows=6, n_agents=3, n_actions=4, state_dim=5):
    full = rng.normal(size=(rows * n_agents, n_actions))
    actions = rng.integers(0, n_actions, size=(rows, n_agents))
    avail = np.ones((rows * n_agents, n_actions))
    states = rng.normal(size=(rows, state_dim))
    return mx.make_mixer_input(full, states, actions, avail)


def test_vdn_sum():
    inp = mx.MixerInput(
        states=np.zeros((1, 1)),
        chosen=np.array([[2.0, 3.0, -1.0]]),
        full=None,
        actions=np.zeros((1, 3), dtype=np.int64),
        avail=np.ones((3, 4)),
    )
    assert mx.vdn_mix(inp).tolist() == [4.0]


def test_vdn_zero():
    inp = mx.MixerInput(
        states=np.zeros((1, 1)),
        chosen=np.zeros((1, 3)),
        full=None,
        actions=np.zeros((1, 3), dtype=np.int64),
        avail=np.ones((3, 4)),
    )
    assert mx.vdn_mix(inp).tolist() == [0.0]


def test_vdn_linearity():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(8, 3))
    v = rng.normal(size=(8, 3))

    def mix(chosen):
        inp = mx.MixerInput(
            states=np.zeros((8, 1)),
            chosen=chosen,
            full=None,
            actions=np.zeros((8, 3), dtype=np.int64),
            avail=np.ones((24, 4)),
        )
        return mx.vdn_mix(inp)

    assert np.allclose(mix(u) + mix(v), mix(u + v), atol=1e-12)


def test_qmix_zero_params_zero_output():
    rng = np.random.default_rng(1)
    mixer = mx.QmixMixer(state_dim=5, n_agents=3, embed_dim=8)
    params = mixer.init_params(np.random.default_rng(2))
    for name in params.names():
        params[name] = np.zeros_like(params[name])
    inp = random_input(rng)
    assert np.array_equal(mixer.mix(params, inp), np.zeros(6))


def test_qmix_scalar_loop_reference():
    """Seed-5 params, fixed (s, u): straight-line evaluation of the formula."""
    mixer = mx.QmixMixer(state_dim=3, n_agents=2, embed_dim=4)
    params = mixer.init_params(np.random.default_rng(5))
    rng = np.random.default_rng(6)
    inp = random_input(rng, rows=3, n_agents=2, n_actions=3, state_dim=3)
    got = mixer.mix(params, inp)

    chosen = np.asarray(inp.chosen)
    for r in range(3):
        s = inp.states[r]
        w1_flat = np.abs(params["hyper_w1.w"] @ s + params["hyper_w1.b"])
        b1 = params["hyper_b1.w"] @ s + params["hyper_b1.b"]
        hidden = np.zeros(4)
        for e in range(4):
            acc = b1[e]
            for a in range(2):
                acc += w1_flat[a * 4 + e] * chosen[r, a]
            hidden[e] = acc if acc > 0 else np.expm1(acc)
        w2 = np.abs(params["hyper_w2.w"] @ s + params["hyper_w2.b"])
        v_hidden = np.maximum(params["v1.w"] @ s + params["v1.b"], 0.0)
        v = params["v2.w"] @ v_hidden + params["v2.b"]
        expected = float(hidden @ w2 + v[0])
        assert got[r] == pytest.approx(expected, abs=1e-12)


def test_qmix_monotone_in_each_utility():
    mixer = mx.QmixMixer(state_dim=4, n_agents=3, embed_dim=8)
    rng = np.random.default_rng(7)
    violations = 0
    for trial in range(200):
        params = mixer.init_params(np.random.default_rng(trial))
        inp = random_input(rng, rows=2, n_agents=3, n_actions=4, state_dim=4)
        base = mixer.mix(params, inp)
        for agent in range(3):
            bumped = np.asarray(inp.chosen).copy()
            bumped[:, agent] += 0.1
            inp2 = mx.MixerInput(inp.states, bumped, inp.full, inp.actions, inp.avail)
            if np.any(mixer.mix(params, inp2) < base - 1e-12):
                violations += 1
    assert violations == 0


def test_qmix_analytic_gradient_nonnegative():
    mixer = mx.QmixMixer(state_dim=4, n_agents=3, embed_dim=8)
    rng = np.random.default_rng(8)
    for trial in range(50):
        params = mixer.init_params(np.random.default_rng(100 + trial))
        inp = random_input(rng, rows=4, n_agents=3, n_actions=4, state_dim=4)
        _, du = mx.mixer_gradients(mixer, params, inp, np.ones(4))
        assert np.all(du >= 0.0)


def test_qplex_all_greedy_collapses_to_value_sum():
    mixer = mx.QplexMixer(state_dim=3, n_agents=3, n_actions=4)
    params = mixer.init_params(np.random.default_rng(9))
    rng = np.random.default_rng(10)
    full = rng.normal(size=(6 * 3, 4))
    greedy = full.argmax(axis=1).reshape(6, 3)
    avail = np.ones((6 * 3, 4))
    states = rng.normal(size=(6, 3))
    inp = mx.make_mixer_input(full, states, greedy, avail)
    got = mixer.mix(params, inp)
    expected = full.max(axis=1).reshape(6, 3).sum(axis=1)
    assert np.allclose(got, expected, atol=1e-12)
    assert inp.greedy_flags().all()


def test_qplex_lambda_one_collapses_to_vdn():
    mixer = mx.QplexMixer(state_dim=3, n_agents=3, n_actions=4)
    params = mixer.init_params(np.random.default_rng(11))
    rng = np.random.default_rng(12)
    inp = random_input(rng, rows=5, n_agents=3, n_actions=4, state_dim=3)
    got = mixer.mix(params, inp, lam_override=1.0)
    assert np.allclose(got, np.asarray(inp.chosen).sum(axis=1), atol=1e-12)


def test_qplex_advantages_nonpositive():
    mixer = mx.QplexMixer(state_dim=3, n_agents=2, n_actions=5)
    rng = np.random.default_rng(13)
    inp = random_input(rng, rows=10, n_agents=2, n_actions=5, state_dim=3)
    full = np.asarray(inp.full)
    v = full.max(axis=1).reshape(10, 2)
    assert np.all(np.asarray(inp.chosen) - v <= 0.0)


def test_qplex_igm_by_enumeration():
    """Joint argmax of q_tot equals the tuple of per-agent argmaxes."""
    n_agents, n_actions = 3, 5
    mixer = mx.QplexMixer(state_dim=4, n_agents=n_agents, n_actions=n_actions)
    rng = np.random.default_rng(14)
    for draw in range(20):
        params = mixer.init_params(np.random.default_rng(200 + draw))
        state = rng.normal(size=(1, 4))
        full_one = rng.normal(size=(n_agents, n_actions))
        joints = list(itertools.product(range(n_actions), repeat=n_agents))
        values = []
        for joint in joints:
            actions = np.array([joint])
            inp = mx.make_mixer_input(
                np.tile(full_one, (1, 1)), state, actions, np.ones((n_agents, n_actions))
            )
            values.append(mixer.mix(params, inp)[0])
        best_joint = joints[int(np.argmax(values))]
        assert best_joint == tuple(full_one.argmax(axis=1))


def test_mixer_gradients_vdn_ones():
    mixer = mx.VdnMixer()
    rng = np.random.default_rng(15)
    inp = random_input(rng, rows=4, n_agents=3, n_actions=4)
    grads, du = mx.mixer_gradients(mixer, nc.ParamStore(), inp, np.ones(4))
    picked = np.take_along_axis(du, inp.actions.reshape(-1, 1), axis=1)
    assert np.array_equal(picked, np.ones((12, 1)))
    assert du.sum() == 12.0  # nothing flows to unchosen actions


@pytest.mark.parametrize("kind", ["vdn", "qmix", "qplex"])
def test_mixer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(16)
    mixer = mx.make_mixer(kind, state_dim=4, n_agents=3, n_actions=4, embed_dim=6)
    params = mixer.init_params(np.random.default_rng(17))
    inp = random_input(rng, rows=3, n_agents=3, n_actions=4, state_dim=4)
    upstream = rng.normal(size=3)

    analytic, _ = mx.mixer_gradients(mixer, params, inp, upstream)
    numeric = nc.finite_difference_gradient(
        lambda store: float((mixer.mix(store, inp) * upstream).sum()), params, 1e-6
    )
    for name in params.names():
        scale = np.maximum(np.abs(numeric[name]), 1e-7)
        assert np.all(np.abs(analytic[name] - numeric[name]) <= 1e-4 * scale + 1e-7), name
