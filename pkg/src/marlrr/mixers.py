"""Global-value compositions of per-agent utilities: VDN, QMIX, QPLEX.

Every mixer consumes a MixerInput over R = batch x time rows and produces
q_tot [R].  ``mix`` evaluates in plain numpy (target side, probes);
``mix_tape`` records the same computation on a Graph so gradients chain
from the TD loss through the mixer into the agent BPTT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError

# Finite stand-in for -inf when masking unavailable actions; keeps padded
# rows NaN-free so the valid mask can zero them exactly.
NEG_MASK = 1e9

QPLEX_LAMBDA_FLOOR = 1e-6


@dataclass
class MixerInput:
    """Utilities and conditioning data for one mixer evaluation.

    full/avail are flat [R * n_agents, n_actions]; chosen is [R, n_agents]
    (utilities gathered at the taken actions); states is [R, state_dim].
    chosen/full may be tape nodes on the training path.
    """

    states: np.ndarray
    chosen: object
    full: object
    actions: np.ndarray
    avail: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]

    def greedy_flags(self) -> np.ndarray:
        """Per-agent indicator that the taken action attains the agent max."""
        full = self.full.value if isinstance(self.full, nc.Node) else self.full
        chosen = self.chosen.value if isinstance(self.chosen, nc.Node) else self.chosen
        masked = np.where(self.avail > 0, full, -NEG_MASK)
        best = masked.max(axis=1).reshape(chosen.shape)
        return chosen >= best


def make_mixer_input(full, states, actions, avail) -> MixerInput:
    """Gather chosen utilities from ``full`` (array or node) at the actions."""
    idx = actions.reshape(-1, 1)
    if isinstance(full, nc.Node):
        chosen = nc.reshape(nc.take_along(full, idx, 1), actions.shape)
    else:
        chosen = np.take_along_axis(full, idx, 1).reshape(actions.shape)
    return MixerInput(states=states, chosen=chosen, full=full, actions=actions, avail=avail)


class VdnMixer:
    """Additive composition: q_tot = sum_i u_i; the state is ignored."""

    kind = "vdn"

    def init_params(self, rng) -> nc.ParamStore:
        return nc.ParamStore()

    def mix(self, params: nc.ParamStore, inp: MixerInput) -> np.ndarray:
        return np.asarray(inp.chosen).sum(axis=1)

    def mix_tape(self, graph: nc.Graph, params: nc.ParamStore, inp: MixerInput) -> nc.Node:
        return nc.reduce_sum(inp.chosen, axis=1)


class QmixMixer:
    """Monotonic two-layer mixing network with state hypernetworks.

    q_tot = w2(s)^T ELU(|W1(s)| u + b1(s)) + V(s) with W1, b1, w2 produced
    by linear hypernetworks of the state and V a two-layer scalar head;
    the absolute values keep dq_tot/du_i >= 0 everywhere.
    """

    kind = "qmix"

    def __init__(self, state_dim: int, n_agents: int, embed_dim: int = 32):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.embed_dim = embed_dim

    def init_params(self, rng) -> nc.ParamStore:
        s, n, e = self.state_dim, self.n_agents, self.embed_dim
        return nc.init_params(
            {
                "hyper_w1.w": (n * e, s), "hyper_w1.b": (n * e,),
                "hyper_b1.w": (e, s), "hyper_b1.b": (e,),
                "hyper_w2.w": (e, s), "hyper_w2.b": (e,),
                "v1.w": (e, s), "v1.b": (e,),
                "v2.w": (1, e), "v2.b": (1,),
            },
            rng,
        )

    def _check(self, inp: MixerInput) -> None:
        if inp.states.ndim != 2 or inp.states.shape[1] != self.state_dim:
            raise DimensionError(
                f"states {inp.states.shape} do not match state_dim {self.state_dim}"
            )

    def mix(self, params: nc.ParamStore, inp: MixerInput) -> np.ndarray:
        self._check(inp)
        s = inp.states
        rows = s.shape[0]
        n, e = self.n_agents, self.embed_dim
        w1 = np.abs(nc.linear_forward(params["hyper_w1.w"], params["hyper_w1.b"], s))
        b1 = nc.linear_forward(params["hyper_b1.w"], params["hyper_b1.b"], s)
        pre = np.einsum("ra,rae->re", np.asarray(inp.chosen), w1.reshape(rows, n, e)) + b1
        hidden = np.where(pre > 0, pre, np.expm1(pre))
        w2 = np.abs(nc.linear_forward(params["hyper_w2.w"], params["hyper_w2.b"], s))
        v_hidden = np.maximum(nc.linear_forward(params["v1.w"], params["v1.b"], s), 0.0)
        v = nc.linear_forward(params["v2.w"], params["v2.b"], v_hidden)
        return (hidden * w2).sum(axis=1) + v[:, 0]

    def hidden_activations(self, params: nc.ParamStore, inp: MixerInput) -> np.ndarray:
        """ELU mixing-layer output [R, embed]; probed by the plasticity module."""
        self._check(inp)
        s = inp.states
        rows = s.shape[0]
        w1 = np.abs(nc.linear_forward(params["hyper_w1.w"], params["hyper_w1.b"], s))
        b1 = nc.linear_forward(params["hyper_b1.w"], params["hyper_b1.b"], s)
        pre = np.einsum(
            "ra,rae->re",
            np.asarray(inp.chosen),
            w1.reshape(rows, self.n_agents, self.embed_dim),
        ) + b1
        return np.where(pre > 0, pre, np.expm1(pre))

    def mix_tape(self, graph: nc.Graph, params: nc.ParamStore, inp: MixerInput) -> nc.Node:
        self._check(inp)
        s = nc.const(inp.states)
        rows = inp.states.shape[0]
        n, e = self.n_agents, self.embed_dim
        p = lambda name: graph.leaf(params, name)  # noqa: E731
        w1 = nc.reshape(nc.absval(nc.linear(s, p("hyper_w1.w"), p("hyper_w1.b"))), (rows, n, e))
        b1 = nc.linear(s, p("hyper_b1.w"), p("hyper_b1.b"))
        u = nc.reshape(inp.chosen, (rows, n, 1))
        hidden = nc.elu(nc.add(nc.reduce_sum(nc.mul(u, w1), axis=1), b1))
        w2 = nc.absval(nc.linear(s, p("hyper_w2.w"), p("hyper_w2.b")))
        v = nc.linear(nc.relu(nc.linear(s, p("v1.w"), p("v1.b"))), p("v2.w"), p("v2.b"))
        return nc.add(nc.reduce_sum(nc.mul(hidden, w2), axis=1), nc.reshape(v, (rows,)))


class QplexMixer:
    """Duplex-dueling composition with strictly positive advantage weights.

    V_i = max_a u_i(a) over available actions, A_i = u_i(chosen) - V_i <= 0,
    q_tot = sum_i V_i + sum_i lambda_i(s, a) A_i with
    lambda_i = |w_i(s, a)| + floor > 0 from a state-and-action-conditioned
    linear head, so the joint argmax equals the per-agent argmaxes (IGM).
    """

    kind = "qplex"

    def __init__(self, state_dim: int, n_agents: int, n_actions: int):
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.n_actions = n_actions

    def init_params(self, rng) -> nc.ParamStore:
        in_dim = self.state_dim + self.n_agents * self.n_actions
        return nc.init_params(
            {"lam.w": (self.n_agents, in_dim), "lam.b": (self.n_agents,)}, rng
        )

    def _lambda_inputs(self, inp: MixerInput) -> np.ndarray:
        rows = inp.states.shape[0]
        one_hot = np.zeros((rows, self.n_agents, self.n_actions))
        np.put_along_axis(one_hot, inp.actions[:, :, None], 1.0, axis=2)
        return np.concatenate([inp.states, one_hot.reshape(rows, -1)], axis=1)

    def mix(
        self,
        params: nc.ParamStore,
        inp: MixerInput,
        lam_override: float | None = None,
    ) -> np.ndarray:
        full = np.asarray(inp.full)
        chosen = np.asarray(inp.chosen)
        masked = np.where(inp.avail > 0, full, -NEG_MASK)
        v = masked.max(axis=1).reshape(chosen.shape)
        adv = chosen - v
        if lam_override is not None:
            lam = np.full_like(adv, lam_override)
        else:
            lam = np.abs(
                nc.linear_forward(params["lam.w"], params["lam.b"], self._lambda_inputs(inp))
            ) + QPLEX_LAMBDA_FLOOR
        return v.sum(axis=1) + (lam * adv).sum(axis=1)

    def mix_tape(self, graph: nc.Graph, params: nc.ParamStore, inp: MixerInput) -> nc.Node:
        rows, n = inp.actions.shape
        mask_shift = np.where(inp.avail > 0, 0.0, -NEG_MASK)
        v = nc.reshape(nc.reduce_max(nc.add(inp.full, nc.const(mask_shift)), axis=1), (rows, n))
        adv = nc.sub(inp.chosen, v)
        lam = nc.add(
            nc.absval(
                nc.linear(
                    nc.const(self._lambda_inputs(inp)),
                    graph.leaf(params, "lam.w"),
                    graph.leaf(params, "lam.b"),
                )
            ),
            nc.const(QPLEX_LAMBDA_FLOOR),
        )
        return nc.add(
            nc.reduce_sum(v, axis=1), nc.reduce_sum(nc.mul(lam, adv), axis=1)
        )


def make_mixer(kind: str, state_dim: int, n_agents: int, n_actions: int, embed_dim: int = 32):
    if kind == "vdn":
        return VdnMixer()
    if kind == "qmix":
        return QmixMixer(state_dim, n_agents, embed_dim)
    if kind == "qplex":
        return QplexMixer(state_dim, n_agents, n_actions)
    raise ConfigError(f"unknown mixer kind {kind!r}")


def vdn_mix(inp: MixerInput) -> np.ndarray:
    return VdnMixer().mix(nc.ParamStore(), inp)


def qmix_mix(params: nc.ParamStore, inp: MixerInput, state_dim: int, n_agents: int,
             embed_dim: int = 32) -> np.ndarray:
    return QmixMixer(state_dim, n_agents, embed_dim).mix(params, inp)


def qplex_mix(params: nc.ParamStore, inp: MixerInput, state_dim: int, n_agents: int,
              n_actions: int, lam_override: float | None = None) -> np.ndarray:
    return QplexMixer(state_dim, n_agents, n_actions).mix(params, inp, lam_override)


def mixer_gradients(mixer, params: nc.ParamStore, inp_arrays: MixerInput,
                    upstream: np.ndarray) -> tuple[nc.GradStore, np.ndarray]:
    """Gradients of sum(upstream * q_tot) for phi and for the full utilities."""
    graph = nc.Graph()
    full_node = nc.const(np.asarray(inp_arrays.full))
    inp = make_mixer_input(
        full_node, inp_arrays.states, inp_arrays.actions, inp_arrays.avail
    )
    q_tot = mixer.mix_tape(graph, params, inp)
    graph.backward(nc.reduce_sum(nc.mul(q_tot, nc.const(upstream))))
    du = full_node.grad if full_node.grad is not None else np.zeros_like(full_node.value)
    return graph.grads(params), du
