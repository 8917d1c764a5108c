"""Finite-element laboratory for local Dirichlet-to-Neumann maps of Schrodinger
operators with piecewise constant complex potentials."""

from .dtn import assemble_dtn, operator_norm, trace_basis
from .fem import solve_dirichlet
from .geometry import Potential, build_grid_partition, chain_to
from .mesh import make_mesh

__version__ = "0.1.0"

__all__ = [
    "Potential",
    "assemble_dtn",
    "build_grid_partition",
    "chain_to",
    "make_mesh",
    "operator_norm",
    "solve_dirichlet",
    "trace_basis",
]
