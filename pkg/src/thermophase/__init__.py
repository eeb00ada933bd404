"""Finite element solver for a thermodynamically consistent Cahn-Hilliard model
coupled with unidirectional damage, visco-elasticity and heat conduction."""

from . import errors, grid, material, monitors, stepper
from .grid import Mesh
from .material import MaterialModel
from .stepper import Problem, SchemeParams, State, Trajectory, run, step

__all__ = [
    "Mesh", "MaterialModel", "Problem", "SchemeParams", "State", "Trajectory",
    "errors", "grid", "material", "monitors", "run", "step", "stepper",
]
__version__ = "0.1.0"
