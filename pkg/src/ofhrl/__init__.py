"""Offline hierarchical RL toolkit.

Learns a pessimistic synthetic environment (dynamics/reward ensemble with
disagreement-triggered penalty termination) and a state/goal-conditioned
latent action codec from a fixed transition dataset, then trains hierarchical
agents inside it as if it were online.
"""

__version__ = "0.1.0"
