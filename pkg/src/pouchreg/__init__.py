"""Two-phase registration of deformable-tissue image sequences.

Mask-guided rigid pre-alignment followed by multi-level cubic B-spline
free-form deformation, with boundary refinement, a synthetic benchmark
generator and evaluation metrics.
"""

from .ffd import Lattice, RoiRect, TransformChain, basis, compose_apply, ffd_displace, refine_level
from .nonrigid import EnergyConfig, register_nonrigid
from .rigid import RigidConfig, RigidParams, register_rigid

__version__ = "0.1.0"

__all__ = [
    "EnergyConfig",
    "Lattice",
    "RigidConfig",
    "RigidParams",
    "RoiRect",
    "TransformChain",
    "basis",
    "compose_apply",
    "ffd_displace",
    "refine_level",
    "register_nonrigid",
    "register_rigid",
]
