"""Transformer-encoder MPC with DC attention bounds and a convex-concave loop."""

from . import ccp, cli, convexsolver, dcbounds, mpc, plant, simplexsets, tfe, train

__all__ = [
    "plant",
    "tfe",
    "train",
    "dcbounds",
    "simplexsets",
    "convexsolver",
    "ccp",
    "mpc",
    "cli",
]
