"""Replay-ratio training for cooperative multi-agent Q-learning.

Value decomposition (VDN, QMIX, QPLEX) over a shared recurrent utility
network, trained with a configurable number of gradient updates per
collected episode, on built-in Dec-POMDP environments, with a
dormant-neuron plasticity probe and an experiment CLI.
"""

__version__ = "0.1.0"
