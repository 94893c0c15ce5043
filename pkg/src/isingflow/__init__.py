"""Cooling trajectories of the 2D Ising model.

Ground truth comes from sign-constrained Wolff annealing checked against the
exact solution; a latent flow model learns to reproduce the trajectories.
"""

__version__ = "0.1.0"
