"""Variational policy propagation for networked multi-agent reinforcement learning.

Exact and variational inference on pairwise MRFs, a small reverse-mode autodiff
engine, message-passing policies, a multi-agent soft actor-critic trainer and the
networked environments it is evaluated on.
"""
from .graph import Graph, build_grid, build_knn
from .mrf import PairwiseMRF, brute_force_joint, exact_marginals
from .policy import PolicyConfig, VPPPolicy
from .variational import bethe_free_energy, lbp_solve, mean_field_solve

__version__ = "0.1.0"

__all__ = [
    "Graph", "build_grid", "build_knn",
    "PairwiseMRF", "brute_force_joint", "exact_marginals",
    "PolicyConfig", "VPPPolicy",
    "bethe_free_energy", "lbp_solve", "mean_field_solve",
]
