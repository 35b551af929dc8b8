"""Mimetic finite differences and symplectic midpoint stepping for nonlinear wave equations on polygonal meshes."""
from .dynamics import WaveProblem, hamiltonian_h
from .integrator import NewtonConfig, SimState, run, sim_step
from .mesh import PolyMesh, generate_for_target_h, generate_voronoi, load_mesh, save_mesh
from .operators import MimeticOperators, assemble
from .spaces import CellField, FluxField, interpolate_cell, interpolate_flux

__all__ = [
    "CellField", "FluxField", "MimeticOperators", "NewtonConfig", "PolyMesh", "SimState",
    "WaveProblem", "assemble", "generate_for_target_h", "generate_voronoi", "hamiltonian_h",
    "interpolate_cell", "interpolate_flux", "load_mesh", "run", "save_mesh", "sim_step",
]
__version__ = "0.1.0"
