import math

import numpy as np
import pytest

from marlrr import numcore as nc
from marlrr.errors import ConfigError, ContractError, DimensionError, NumericError, StateError


def test_tensor_rejects_nonfinite():
    with pytest.raises(NumericError):
        nc.tensor([1.0, np.nan])
    with pytest.raises(DimensionError):
        nc.tensor([1.0, 2.0, 3.0], shape=(2, 2))


def test_linear_forward_identity():
    out = nc.linear_forward(np.eye(2), np.zeros(2), np.array([[3.0, -1.0]]))
    assert np.array_equal(out, [[3.0, -1.0]])


def test_linear_forward_forced_arithmetic():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = nc.linear_forward(w, np.zeros(2), np.array([[1.0, 1.0]]))
    assert np.array_equal(out, [[3.0, 7.0]])


def test_linear_forward_zero_weights():
    out = nc.linear_forward(np.zeros((1, 3)), np.array([5.0]), np.array([[9.0, 8.0, 7.0]]))
    assert np.array_equal(out, [[5.0]])


def test_linear_forward_shape_mismatch():
    with pytest.raises(DimensionError):
        nc.linear_forward(np.eye(2), np.zeros(2), np.ones((1, 3)))


def _zero_gru(width, in_dim):
    return {
        "w_r": np.zeros((width, in_dim)), "u_r": np.zeros((width, width)), "b_r": np.zeros(width),
        "w_z": np.zeros((width, in_dim)), "u_z": np.zeros((width, width)), "b_z": np.zeros(width),
        "w_c": np.zeros((width, in_dim)), "u_c": np.zeros((width, width)), "b_c": np.zeros(width),
    }


def test_gru_cell_zero_params_halves_hidden():
    h = np.array([[1.0, -2.0, 4.0]])
    out = nc.gru_cell_forward(_zero_gru(3, 2), np.zeros((1, 2)), h)
    assert np.allclose(out, 0.5 * h)


def test_gru_cell_fixed_point_at_zero():
    out = nc.gru_cell_forward(_zero_gru(4, 3), np.zeros((2, 3)), np.zeros((2, 4)))
    assert np.array_equal(out, np.zeros((2, 4)))


def _scalar_loop_gru(params, x, h):
    """Straight-line reference: explicit scalar loops over the gate formulas."""
    batch, width = h.shape
    in_dim = x.shape[1]
    out = np.zeros((batch, width))
    for b in range(batch):
        r_row = np.zeros(width)
        z_row = np.zeros(width)
        for i in range(width):
            pre_r = params["b_r"][i]
            pre_z = params["b_z"][i]
            for j in range(in_dim):
                pre_r += params["w_r"][i, j] * x[b, j]
                pre_z += params["w_z"][i, j] * x[b, j]
            for k in range(width):
                pre_r += params["u_r"][i, k] * h[b, k]
                pre_z += params["u_z"][i, k] * h[b, k]
            r_row[i] = 1.0 / (1.0 + math.exp(-pre_r))
            z_row[i] = 1.0 / (1.0 + math.exp(-pre_z))
        for i in range(width):
            pre_c = params["b_c"][i]
            for j in range(in_dim):
                pre_c += params["w_c"][i, j] * x[b, j]
            for k in range(width):
                pre_c += params["u_c"][i, k] * (r_row[k] * h[b, k])
            c_i = math.tanh(pre_c)
            out[b, i] = (1.0 - z_row[i]) * h[b, i] + z_row[i] * c_i
    return out


def test_gru_cell_matches_scalar_loop_reference():
    rng = np.random.default_rng(7)
    batch, in_dim, width = 2, 3, 4
    params = {
        key: rng.normal(size=(width, in_dim if key.startswith("w") else width))
        if not key.startswith("b")
        else rng.normal(size=width)
        for key in nc.GRU_KEYS
    }
    x = rng.normal(size=(batch, in_dim))
    h = rng.normal(size=(batch, width))
    fast = nc.gru_cell_forward(params, x, h)
    slow = _scalar_loop_gru(params, x, h)
    assert np.allclose(fast, slow, atol=1e-12)


def test_backward_closed_form_quadratic():
    params = nc.ParamStore({"w": np.array([2.0])})
    g = nc.Graph()
    w = g.leaf(params, "w")
    pred = nc.scale(w, 3.0)              # w * x with x = 3
    err = nc.sub(pred, nc.const(np.array([1.0])))
    loss = nc.reduce_sum(nc.mul(err, err))
    g.backward(loss)
    grads = g.grads(params)
    assert np.allclose(grads["w"], [30.0])


def test_backward_nonparticipating_param_zero():
    params = nc.ParamStore({"w": np.array([2.0]), "b": np.array([5.0])})
    g = nc.Graph()
    w = g.leaf(params, "w")
    loss = nc.reduce_sum(nc.mul(w, w))
    g.backward(loss)
    grads = g.grads(params)
    assert np.array_equal(grads["b"], [0.0])


def test_backward_without_forward_raises():
    g = nc.Graph()
    with pytest.raises(StateError):
        g.backward(nc.const(np.array(1.0)))


def test_backward_twice_raises():
    params = nc.ParamStore({"w": np.array([2.0])})
    g = nc.Graph()
    loss = nc.reduce_sum(g.leaf(params, "w"))
    g.backward(loss)
    with pytest.raises(StateError):
        g.backward(loss)


def test_finite_difference_quadratic():
    params = nc.ParamStore({"p": np.array([3.0])})
    grads = nc.finite_difference_gradient(lambda s: float(s["p"][0] ** 2), params, 1e-5)
    assert abs(grads["p"][0] - 6.0) < 1e-8
    assert params["p"][0] == 3.0  # restored exactly


def test_finite_difference_constant():
    params = nc.ParamStore({"p": np.arange(4.0)})
    grads = nc.finite_difference_gradient(lambda s: 1.25, params)
    assert np.array_equal(grads["p"], np.zeros(4))


def test_finite_difference_sin():
    params = nc.ParamStore({"p": np.array([0.0])})
    grads = nc.finite_difference_gradient(lambda s: math.sin(s["p"][0]), params, 1e-5)
    assert abs(grads["p"][0] - 1.0) < 1e-9


def test_finite_difference_nonfinite_raises():
    params = nc.ParamStore({"p": np.array([1.0])})
    with pytest.raises(NumericError):
        nc.finite_difference_gradient(lambda s: float("nan"), params)


def test_sgd_step_cases():
    params = nc.ParamStore({"p": np.array([1.0])})
    grads = nc.GradStore({"p": np.array([2.0])})
    nc.sgd_step(params, grads, 0.5)
    assert np.array_equal(params["p"], [0.0])
    assert params.version == 1

    params = nc.ParamStore({"p": np.array([1.0, 1.0])})
    before = params["p"].copy()
    nc.sgd_step(params, nc.GradStore({"p": np.array([1.0, -1.0])}), 0.0)
    assert np.array_equal(params["p"], before)
    assert params.version == 1
    nc.sgd_step(params, nc.GradStore({"p": np.array([1.0, -1.0])}), 0.1)
    assert np.allclose(params["p"], [0.9, 1.1])


def test_ema_cases():
    target = nc.ParamStore({"p": np.array([0.0])})
    online = nc.ParamStore({"p": np.array([1.0])})
    nc.ema_update(target, online, 0.5)
    assert np.allclose(target["p"], [0.5])

    target = nc.ParamStore({"p": np.array([3.0])})
    nc.ema_update(target, nc.ParamStore({"p": np.array([3.0])}), 0.3)
    assert np.array_equal(target["p"], [3.0])

    with pytest.raises(ConfigError):
        nc.ema_update(target, online, 1.0)


def test_ema_closed_form_geometric_blend():
    target = nc.ParamStore({"p": np.array([0.0])})
    online = nc.ParamStore({"p": np.array([1.0])})
    for _ in range(10):
        nc.ema_update(target, online, 0.1)
    assert abs(target["p"][0] - 0.6513215599) < 1e-9


def test_elementwise_updates_ignore_name_order():
    rng = np.random.default_rng(11)
    names = [f"p{i}" for i in range(6)]
    values = {n: rng.normal(size=(3, 2)) for n in names}
    grads = {n: rng.normal(size=(3, 2)) for n in names}

    a = nc.ParamStore({n: values[n].copy() for n in names})
    b = nc.ParamStore({n: values[n].copy() for n in reversed(names)})
    nc.sgd_step(a, nc.GradStore({n: grads[n] for n in names}), 0.05)
    nc.sgd_step(b, nc.GradStore({n: grads[n] for n in reversed(names)}), 0.05)
    for n in names:
        assert np.array_equal(a[n], b[n])

    ta = nc.ParamStore({n: values[n].copy() for n in names})
    tb = nc.ParamStore({n: values[n].copy() for n in reversed(names)})
    nc.ema_update(ta, a, 0.25)
    nc.ema_update(tb, b, 0.25)
    for n in names:
        assert np.array_equal(ta[n], tb[n])


def test_init_params_deterministic_and_bounded():
    shapes = {"enc.w": (8, 4), "enc.b": (8,), "out.w": (3, 8), "out.b": (3,)}
    a = nc.init_params(shapes, np.random.default_rng(42))
    b = nc.init_params(shapes, np.random.default_rng(42))
    for name in shapes:
        assert np.array_equal(a[name], b[name])
    assert np.all(np.abs(a["enc.w"]) <= 0.5)  # fan_in 4
    assert np.array_equal(a["enc.b"], np.zeros(8))
    assert np.array_equal(a["out.b"], np.zeros(3))


def test_reset_selected_variants():
    shapes = {"enc.w": (4, 4), "enc.b": (4,), "out.w": (2, 4), "out.b": (2,)}
    params = nc.init_params(shapes, np.random.default_rng(1))

    untouched = params.copy()
    nc.reset_selected(params, lambda name: False, np.random.default_rng(2))
    for name in shapes:
        assert np.array_equal(params[name], untouched[name])

    fresh = nc.init_params(shapes, np.random.default_rng(3))
    nc.reset_selected(params, lambda name: True, np.random.default_rng(3))
    for name in shapes:
        assert np.array_equal(params[name], fresh[name])

    before = params.copy()
    nc.reset_selected(params, "out.", np.random.default_rng(4))
    assert np.array_equal(params["enc.w"], before["enc.w"])
    assert np.array_equal(params["enc.b"], before["enc.b"])
    assert not np.array_equal(params["out.w"], before["out.w"])


def test_tape_ops_match_finite_differences():
    """Random small graph through every tape op; analytic vs central differences."""
    rng = np.random.default_rng(5)
    params = nc.ParamStore({
        "w1": rng.normal(size=(4, 3)),
        "b1": rng.normal(size=4),
        "w2": rng.normal(size=(2, 4)),
    })
    x = rng.normal(size=(5, 3))
    idx = rng.integers(0, 2, size=(5, 1))

    def build(store, g):
        h = nc.elu(nc.linear(nc.const(x), g.leaf(store, "w1"), g.leaf(store, "b1")))
        h = nc.relu(nc.sub(h, nc.scale(nc.sigmoid(h), 0.5)))
        h = nc.add(nc.tanh(h), nc.mul(h, nc.const(0.25)))
        q = nc.matmul(h, _transposed(g.leaf(store, "w2")))
        v = nc.reduce_max(q, axis=1)
        picked = nc.take_along(q, idx, axis=1)
        stacked = nc.concat([nc.reshape(v, (5, 1)), picked], axis=1)
        return nc.reduce_sum(nc.mul(nc.absval(stacked), stacked), axis=None)

    def _transposed(node):
        return nc.Node(node.value.T, (node,), lambda g_up: (g_up.T,))

    def loss_value(store):
        g = nc.Graph()
        return float(build(store, g).value)

    g = nc.Graph()
    loss = build(params, g)
    g.backward(loss)
    analytic = g.grads(params)
    numeric = nc.finite_difference_gradient(loss_value, params, 1e-6)
    for name in params.names():
        assert np.allclose(analytic[name], numeric[name], rtol=1e-5, atol=1e-7), name


def test_gru_sequence_matches_step_loop_and_fd():
    rng = np.random.default_rng(9)
    steps, rows, width = 5, 3, 4
    params = nc.ParamStore({
        "u_r": rng.normal(size=(width, width)) * 0.4,
        "u_z": rng.normal(size=(width, width)) * 0.4,
        "u_c": rng.normal(size=(width, width)) * 0.4,
    })
    xr = rng.normal(size=(steps * rows, width))
    xz = rng.normal(size=(steps * rows, width))
    xc = rng.normal(size=(steps * rows, width))
    h0 = np.zeros((rows, width))
    weight = rng.normal(size=(steps * rows, width))

    def run(store):
        g = nc.Graph()
        h = nc.gru_sequence(
            nc.const(xr), nc.const(xz), nc.const(xc),
            g.leaf(store, "u_r"), g.leaf(store, "u_z"), g.leaf(store, "u_c"),
            h0, steps,
        )
        return g, h, nc.reduce_sum(nc.mul(h, nc.const(weight)))

    g, h_node, loss = run(params)

    # forward agrees with a step-by-step evaluation of the same update
    h = h0
    expected = []
    for t in range(steps):
        blk = slice(t * rows, (t + 1) * rows)
        r = 1.0 / (1.0 + np.exp(-(xr[blk] + h @ params["u_r"].T)))
        z = 1.0 / (1.0 + np.exp(-(xz[blk] + h @ params["u_z"].T)))
        c = np.tanh(xc[blk] + (r * h) @ params["u_c"].T)
        step_ref = (1.0 - z) * h + z * c
        h = step_ref
        expected.append(step_ref)
    assert np.allclose(h_node.value.reshape(steps, rows, width), np.stack(expected), atol=1e-12)

    g.backward(loss)
    analytic = g.grads(params)
    numeric = nc.finite_difference_gradient(
        lambda s: float(run(s)[2].value), params, 1e-6
    )
    for name in params.names():
        assert np.allclose(analytic[name], numeric[name], rtol=1e-5, atol=1e-7), name
