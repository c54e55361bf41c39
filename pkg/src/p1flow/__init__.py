"""Monolithic finite element solver for incompressible flow on equal-order
linear simplices."""
from .errors import *  # noqa: F401,F403
from .mesh import Mesh, gen_pipe, gen_rect, read_msh2, parse_msh2, write_msh2
from .weakform import FieldState, MaterialParams
from .solver import (BoundaryCondition, Ramp, SolverConfig, newton_solve,
                     no_slip, time_march, zero_state)

__version__ = "0.1.0"
