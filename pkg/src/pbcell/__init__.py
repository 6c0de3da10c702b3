"""Poisson-Boltzmann solver on periodic porous unit cells, with small- and
large-beta asymptotic approximations and tools to check their error rates."""

__version__ = "0.1.0"

from .electrolyte import Electrolyte, Species, make_electrolyte, symmetric
from .errors import PBCellError
from .fem import Field, norms
from .geometry import CellMesh, SurfaceData, build_disk_cell, build_slab, load_mesh, write_mesh
from .solver import SolverOptions, SolveReport, solve

__all__ = [
    "CellMesh", "Electrolyte", "Field", "PBCellError", "Species", "SolveReport", "SolverOptions",
    "SurfaceData", "build_disk_cell", "build_slab", "load_mesh", "make_electrolyte", "norms", "solve",
    "symmetric", "write_mesh",
]
