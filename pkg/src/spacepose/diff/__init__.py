"""Minimal reverse-mode differentiation over numpy arrays."""

from spacepose.diff import checkpoint, ops
from spacepose.diff.gradcheck import finite_diff_check
from spacepose.diff.node import Node, backward, detach, topological_order, zero_grads
from spacepose.diff.rng import Rng, derive_seed, splitmix64

__all__ = [
    "Node", "backward", "detach", "topological_order", "zero_grads",
    "Rng", "derive_seed", "splitmix64", "finite_diff_check", "ops", "checkpoint",
]
