"""Dormant-neuron-ratio probe and the recurrent-vs-feedforward comparison.

A neuron's score is its mean absolute activation over a probe batch,
normalized by the layer's average of those means; neurons with score at or
below rho count as dormant.  Probed layers: the post-ReLU encoder, the
recurrent-layer output, and (for QMIX) the ELU mixing layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import agent as ag
from .errors import ContractError, NotReadyError
from .mixers import QmixMixer, make_mixer_input
from .replay import collate

DEFAULT_RHO = 0.001
PROBE_LAYERS = ("encoder_relu", "recurrent", "mixer_hidden")


@dataclass
class LayerDnr:
    name: str
    width: int
    scores: np.ndarray
    dormant: int
    ratio: float


@dataclass
class DnrReport:
    layers: list[LayerDnr]
    rho: float

    @property
    def overall(self) -> float:
        total = sum(layer.width for layer in self.layers)
        dormant = sum(layer.dormant for layer in self.layers)
        return dormant / total if total else 0.0


def neuron_scores(activations: np.ndarray) -> np.ndarray:
    """Per-neuron normalized mean absolute activation over a probe batch.

    activations is [samples, width].  When the layer's mean absolute
    activation is exactly zero, every score is defined as zero (the layer is
    fully dormant).
    """
    activations = np.asarray(activations)
    if activations.ndim != 2 or activations.size == 0:
        raise ContractError("activation capture must be a non-empty 2-D matrix")
    means = np.abs(activations).mean(axis=0)
    denom = means.mean()
    if denom == 0.0:
        return np.zeros_like(means)
    return means / denom


def dormant_ratio(scores: np.ndarray, rho: float = DEFAULT_RHO) -> float:
    if rho < 0:
        raise ContractError(f"rho must be >= 0, got {rho}")
    scores = np.asarray(scores)
    return float((scores <= rho).mean())


def probe(
    theta,
    agent_spec: ag.AgentNetworkSpec,
    mixer,
    phi,
    episodes,
    probe_size: int = 32,
    rng: np.random.Generator | None = None,
    rho: float = DEFAULT_RHO,
    layers=PROBE_LAYERS,
) -> DnrReport:
    """Run the agent (and QMIX mixing layer) over a probe batch and score neurons.

    Only valid (non-padded) cells enter the capture.  ``episodes`` is a
    buffer snapshot; up to probe_size of them are sampled without
    replacement.
    """
    if not episodes:
        raise NotReadyError("probe needs at least one stored episode")
    episodes = list(episodes)
    if len(episodes) > probe_size:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(len(episodes), size=probe_size, replace=False)
        episodes = [episodes[i] for i in idx]
    batch = collate(episodes)
    b, t_plus, n, _ = batch.obs_seq.shape
    steps = t_plus - 1
    rows = b * n
    inputs = ag.sequence_inputs(batch, agent_spec)[: steps * rows]
    utilities, hidden, enc = ag.forward_numpy(theta, agent_spec, inputs, steps)

    # valid row mask in the same time-major layout as the activations
    agent_valid = np.repeat(batch.valid.T.reshape(-1), n).astype(bool)

    captures: dict[str, np.ndarray] = {}
    if "encoder_relu" in layers:
        captures["encoder_relu"] = enc[agent_valid]
    if "recurrent" in layers:
        captures["recurrent"] = hidden[agent_valid]
    if "mixer_hidden" in layers and isinstance(mixer, QmixMixer):
        states_tm = batch.states.transpose(1, 0, 2).reshape(steps * b, -1)
        actions_tm = batch.actions.transpose(1, 0, 2).reshape(steps * b, n)
        avail_tm = batch.avail.transpose(1, 0, 2, 3).reshape(steps * rows, -1)
        inp = make_mixer_input(utilities, states_tm, actions_tm, avail_tm)
        mixer_valid = batch.valid.T.reshape(-1).astype(bool)
        captures["mixer_hidden"] = mixer.hidden_activations(phi, inp)[mixer_valid]

    report_layers = []
    for name, matrix in captures.items():
        scores = neuron_scores(matrix)
        ratio = dormant_ratio(scores, rho)
        report_layers.append(
            LayerDnr(
                name=name,
                width=matrix.shape[1],
                scores=scores,
                dormant=int((scores <= rho).sum()),
                ratio=ratio,
            )
        )
    return DnrReport(layers=report_layers, rho=rho)


def compare_rnn_ablation(config):
    """Train the GRU agent and a width-matched feedforward agent side by side.

    Returns (gru_metrics, ff_metrics); both runs share the seed, episode
    budget, and evaluation cadence, so their checkpoint grids align.
    """
    from . import trainer  # local import: trainer depends on this module

    gru_cfg = replace(config, recurrence="gru")
    ff_cfg = replace(config, recurrence="ff")
    return trainer.run(gru_cfg), trainer.run(ff_cfg)
