"""Staggered coarse-resolution neural PDE solvers with physics losses.

Subpackages by concern: fields (grids, stagger decomposition, sequences),
snapshots (binary IO), autodiff (reverse-mode engine), residuals (discrete
PDE residuals and losses), models (compact conv solvers), oracles
(classical reference solvers and random fields), training (loop, rollout,
input optimization), analysis (transfer matrices, rank checks, cost
accounting), config and cli (experiment plumbing).
"""

__version__ = "0.1.0"
