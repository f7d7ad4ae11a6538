"""Learning population-dependent feedback controls for interacting-particle
control problems by pathwise stochastic gradient descent."""

from . import autodiff, embeddings, metrics, networks, policy, problems, simulate, training

__all__ = [
    "autodiff", "embeddings", "metrics", "networks", "policy",
    "problems", "simulate", "training",
]

__version__ = "0.1.0"
